# coding=utf-8
# Copyright 2024 The pFedPT Authors. All rights reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
""" Client-private visual prompts: templates, masked additive application and SGD updates."""
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from transformers.utils import logging

from .modeling_fed_cnn import ParameterVector
from .numerics import PROMPT_PARAMETER_NAME, Gradients, sgd_step


logger = logging.get_logger(__name__)

PROMPT_TEMPLATES = ("padding", "patch-fixed", "patch-random")
PROMPT_MODES = ("add", "replace")
PROMPT_CHECKPOINT_MAGIC = b"PFPT"


@dataclass(frozen=True)
class PromptSpec:
    """
    Template, size `p` (in pixels) and image shape `(C, H, W)` of a visual prompt. `mode="add"` adds the prompt to
    the masked pixels, `mode="replace"` overwrites them.
    """

    template: str = "padding"
    size: int = 4
    image_shape: Tuple[int, int, int] = (3, 32, 32)
    mode: str = "add"

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if self.template not in PROMPT_TEMPLATES:
            raise ValueError(f"Unknown prompt template '{self.template}', should be one of {PROMPT_TEMPLATES}.")
        if self.mode not in PROMPT_MODES:
            raise ValueError(f"Unknown prompt mode '{self.mode}', should be one of {PROMPT_MODES}.")
        if len(self.image_shape) != 3:
            raise ValueError(f"`image_shape` should be (C, H, W), got {self.image_shape}.")
        _, height, width = self.image_shape
        if self.size < 0:
            raise ValueError(f"Prompt size must be non-negative, got {self.size}.")
        if self.template == "padding" and 2 * self.size >= min(height, width):
            raise ValueError(
                f"A padding prompt of size {self.size} needs 2p < min(H, W) = {min(height, width)}."
            )
        if self.template != "padding" and self.size > min(height, width):
            raise ValueError(f"A patch prompt of size {self.size} does not fit in a {height}x{width} image.")


@dataclass(frozen=True)
class TemplateMask:
    """Binary `(H, W)` grid marking where the prompt parameters live."""

    grid: torch.Tensor

    @property
    def popcount(self) -> int:
        return int(self.grid.sum())

    @classmethod
    def from_spec(cls, spec: PromptSpec) -> "TemplateMask":
        _, height, width = spec.image_shape
        p = spec.size
        grid = torch.zeros(height, width, dtype=torch.bool)
        if p > 0:
            if spec.template == "padding":
                grid[:p, :] = True
                grid[height - p :, :] = True
                grid[:, :p] = True
                grid[:, width - p :] = True
            else:
                # patch parameters are stored at the top-left corner; patch-random moves them at apply time
                grid[:p, :p] = True
        return cls(grid=grid)


def prompt_param_count(spec: PromptSpec) -> int:
    """`C p^2` for patch templates, `2 C p (H + W - 2p)` for padding."""
    channels, height, width = spec.image_shape
    p = spec.size
    if spec.template == "padding":
        return 2 * channels * p * (height + width - 2 * p)
    return channels * p * p


@dataclass
class PromptState:
    """The learnable prompt `delta` of one client, zero outside its template mask at all times."""

    spec: PromptSpec
    delta: torch.Tensor
    mask: TemplateMask
    owner: Optional[int] = None
    seed: int = 0
    _support: Optional[torch.Tensor] = field(default=None, repr=False)

    def __post_init__(self):
        self._support = self.mask.grid.unsqueeze(0).expand(self.spec.image_shape).contiguous()

    @property
    def num_parameters(self) -> int:
        return self.spec.image_shape[0] * self.mask.popcount

    @property
    def support(self) -> torch.Tensor:
        """Boolean `(C, H, W)` support of `delta`."""
        return self._support

    def parameter_values(self) -> torch.Tensor:
        """Masked entries of `delta`, in row-major `(C, H, W)` order."""
        return self.delta.detach()[self.support]

    def clone(self) -> "PromptState":
        return PromptState(self.spec, self.delta.detach().clone(), self.mask, self.owner, self.seed)

    def to(self, dtype: torch.dtype) -> "PromptState":
        return PromptState(self.spec, self.delta.detach().to(dtype), self.mask, self.owner, self.seed)

    def as_parameter_vector(self) -> ParameterVector:
        return ParameterVector(OrderedDict([(PROMPT_PARAMETER_NAME, self.delta)]))

    def apply(self, x: torch.Tensor, rng: Optional[torch.Generator] = None) -> torch.Tensor:
        return apply_prompt(x, self, rng=rng)

    def save(self, path: Union[str, os.PathLike]):
        header = json.dumps(
            {
                "template": self.spec.template,
                "size": self.spec.size,
                "image_shape": list(self.spec.image_shape),
                "mode": self.spec.mode,
                "owner": self.owner,
            },
            sort_keys=True,
        ).encode("utf-8")
        values = self.parameter_values().cpu().numpy().astype("<f4")
        with open(path, "wb") as f:
            f.write(PROMPT_CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            f.write(struct.pack("<Q", values.size))
            f.write(values.tobytes())

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "PromptState":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != PROMPT_CHECKPOINT_MAGIC:
                raise ValueError(f"{path} is not a prompt checkpoint (bad magic {magic!r}).")
            (header_len,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(header_len).decode("utf-8"))
            (count,) = struct.unpack("<Q", f.read(8))
            values = np.frombuffer(f.read(), dtype="<f4")
        spec = PromptSpec(header["template"], header["size"], tuple(header["image_shape"]), header["mode"])
        state = init_prompt(spec, owner=header["owner"])
        if count != values.size or count != state.num_parameters:
            raise ValueError(f"Prompt checkpoint {path} holds {values.size} values, expected {state.num_parameters}.")
        with torch.no_grad():
            state.delta[state.support] = torch.from_numpy(values.astype(np.float32))
        return state


def init_prompt(spec: PromptSpec, seed: int = 0, owner: Optional[int] = None) -> PromptState:
    """Zero-initialized prompt, so that a freshly prompted model behaves exactly like the raw one."""
    mask = TemplateMask.from_spec(spec)
    delta = torch.zeros(spec.image_shape, dtype=torch.float32)
    return PromptState(spec=spec, delta=delta, mask=mask, owner=owner, seed=seed)


def _placed_prompt(state: PromptState, rng: Optional[torch.Generator]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Prompt values and boolean support positioned on the image grid."""
    spec = state.spec
    if spec.template != "patch-random":
        return state.delta, state.support

    if rng is None:
        raise ValueError("A patch-random prompt needs an `rng` to draw its anchor.")
    _, height, width = spec.image_shape
    p = spec.size
    top = int(torch.randint(0, height - p + 1, (1,), generator=rng))
    left = int(torch.randint(0, width - p + 1, (1,), generator=rng))
    padding = (left, width - p - left, top, height - p - top)
    values = F.pad(state.delta[:, :p, :p], padding)
    support = F.pad(state.support[:, :p, :p], padding, value=False)
    return values, support


def apply_prompt(x: torch.Tensor, state: PromptState, rng: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Prompted images. With `mode="add"`: `x + M * delta`; pixels off the support are returned bit-identical, and no
    clamping is applied. For `patch-random`, one anchor is drawn from `rng` for the whole batch.
    """
    if tuple(x.shape[-3:]) != state.spec.image_shape:
        raise ValueError(f"Images of shape {tuple(x.shape[-3:])} do not match the prompt shape {state.spec.image_shape}.")
    if state.spec.size == 0:
        return x
    values, support = _placed_prompt(state, rng)
    values = values.to(x.dtype)
    if state.spec.mode == "replace":
        return torch.where(support, values, x)
    return torch.where(support, x + values, x)


def prompt_grad_step(state: PromptState, grads: Union[Gradients, torch.Tensor], lr_g: float) -> PromptState:
    """`delta <- delta - lr_g * grad` on the mask. Off-mask entries stay exactly zero."""
    grad = grads[PROMPT_PARAMETER_NAME] if isinstance(grads, Gradients) else grads
    if grad.shape != state.delta.shape:
        raise ValueError(f"Prompt gradient of shape {tuple(grad.shape)} does not match {tuple(state.delta.shape)}.")
    if torch.any(grad[~state.support] != 0):
        raise ValueError("Prompt gradient has support outside the template mask.")
    params = state.as_parameter_vector()
    sgd_step(params, Gradients(OrderedDict([(PROMPT_PARAMETER_NAME, grad)])), lr_g)
    return state
