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
""" PyTorch federated backbone: the two-convolution CNN and a tiny MLP."""
import copy
import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from torch.nn import CrossEntropyLoss
from transformers.modeling_outputs import ImageClassifierOutput
from transformers.modeling_utils import PreTrainedModel
from transformers.utils import logging

from .configuration_fed_cnn import FedCNNConfig
from .numerics import NonFiniteError


logger = logging.get_logger(__name__)

PARAMETER_CHECKPOINT_MAGIC = b"PFPV"
HEAD_PREFIX = "head."


class ParameterVector:
    """
    Ordered, named view over the trainable parameters of a backbone. This is the unit that is broadcast by the
    server, trained by the clients and averaged at aggregation time. The ordering is the `named_parameters()` order
    of the model it was flattened from, which is stable across processes.
    """

    def __init__(self, tensors: "OrderedDict[str, torch.Tensor]"):
        self.tensors = OrderedDict(tensors)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(self.tensors.keys())

    @property
    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def __len__(self):
        return self.num_parameters

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def clone(self) -> "ParameterVector":
        return ParameterVector(OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()))

    def to(self, dtype: torch.dtype) -> "ParameterVector":
        return ParameterVector(OrderedDict((k, v.to(dtype)) for k, v in self.tensors.items()))

    def select(self, names: Iterable[str]) -> "ParameterVector":
        names = set(names)
        return ParameterVector(OrderedDict((k, v) for k, v in self.tensors.items() if k in names))

    def merge(self, other: "ParameterVector") -> "ParameterVector":
        """Return a copy of `self` with the entries present in `other` replaced."""
        unknown = set(other.names) - set(self.names)
        if unknown:
            raise ValueError(f"Cannot merge unknown parameters {sorted(unknown)}.")
        merged = OrderedDict(self.tensors)
        merged.update(other.tensors)
        return ParameterVector(merged)

    def to_flat(self) -> torch.Tensor:
        if not self.tensors:
            return torch.zeros(0)
        return torch.cat([t.reshape(-1) for t in self.tensors.values()])

    def from_flat(self, flat: torch.Tensor) -> "ParameterVector":
        """Build a vector with the layout of `self` and the values of `flat`."""
        if flat.numel() != self.num_parameters:
            raise ValueError(f"Expected {self.num_parameters} values, got {flat.numel()}.")
        tensors, offset = OrderedDict(), 0
        for name, ref in self.tensors.items():
            tensors[name] = flat[offset : offset + ref.numel()].reshape(ref.shape).to(ref.dtype).clone()
            offset += ref.numel()
        return ParameterVector(tensors)

    def equal(self, other: "ParameterVector") -> bool:
        return self.names == other.names and all(torch.equal(a, other[n]) for n, a in self.tensors.items())

    def save(self, path: Union[str, os.PathLike], spec_tag: str):
        """Write magic, spec tag, count and the float32 little-endian values in canonical order."""
        tag = spec_tag.encode("utf-8")
        values = self.to_flat().detach().cpu().numpy().astype("<f4")
        with open(path, "wb") as f:
            f.write(PARAMETER_CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(tag)))
            f.write(tag)
            f.write(struct.pack("<Q", values.size))
            f.write(values.tobytes())

    def load(self, path: Union[str, os.PathLike], spec_tag: Optional[str] = None) -> "ParameterVector":
        """Read a checkpoint written by `save` into the layout of `self`."""
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != PARAMETER_CHECKPOINT_MAGIC:
                raise ValueError(f"{path} is not a parameter checkpoint (bad magic {magic!r}).")
            (tag_len,) = struct.unpack("<I", f.read(4))
            tag = f.read(tag_len).decode("utf-8")
            (count,) = struct.unpack("<Q", f.read(8))
            values = np.frombuffer(f.read(), dtype="<f4")
        if spec_tag is not None and tag != spec_tag:
            raise ValueError(f"Checkpoint {path} was written for '{tag}', expected '{spec_tag}'.")
        if count != values.size or count != self.num_parameters:
            raise ValueError(
                f"Checkpoint {path} holds {values.size} values (header says {count}), expected {self.num_parameters}."
            )
        return self.from_flat(torch.from_numpy(values.astype(np.float32)))


@dataclass(frozen=True)
class BodyHeadSplit:
    """Partition of the parameter names into the shared body and the private head (final linear layer)."""

    body: Tuple[str, ...]
    head: Tuple[str, ...]

    def num_parameters(self, pv: ParameterVector, part: str = "body") -> int:
        return pv.select(getattr(self, part)).num_parameters


class FedCNNPreTrainedModel(PreTrainedModel):
    """
    An abstract class to handle weights initialization and a simple interface for downloading and loading pretrained
    models.
    """

    config_class = FedCNNConfig
    base_model_prefix = "fed_cnn"
    main_input_name = "pixel_values"

    def _init_weights(self, module):
        # fan-in scaled uniform, drawn from the seeded generator set up in `__init__`
        generator = getattr(self, "_init_generator", None)
        if isinstance(module, (nn.Linear, nn.Conv2d)):
            fan_in = module.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=generator)
                if module.bias is not None:
                    module.bias.zero_()


class FedCNNForImageClassification(FedCNNPreTrainedModel):
    def __init__(self, config: FedCNNConfig):
        super().__init__(config)
        channels, height, width = config.input_shape

        layers = []
        if config.architecture == "cnn-paper":
            size = min(height, width)
            for stage in range(2):
                size = size - config.kernel_size + 1
                if size < 2:
                    raise ValueError(
                        f"Input of spatial size {height}x{width} is too small for two {config.kernel_size}x"
                        f"{config.kernel_size} conv + 2x2 pool stages (stage {stage} would produce {size})."
                    )
                size = size // 2
            layers += [
                nn.Conv2d(channels, config.conv_channels, config.kernel_size),
                nn.ReLU(),
                nn.MaxPool2d(2, 2),
                nn.Conv2d(config.conv_channels, config.conv_channels, config.kernel_size),
                nn.ReLU(),
                nn.MaxPool2d(2, 2),
            ]
            map_height, map_width = config.feature_map_size()
            in_features = config.conv_channels * map_height * map_width
        else:
            in_features = channels * height * width
        layers.append(nn.Flatten())
        for hidden_size in config.hidden_sizes:
            layers += [nn.Linear(in_features, hidden_size), nn.ReLU()]
            in_features = hidden_size

        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(in_features, config.num_classes)

        self._init_generator = torch.Generator().manual_seed(int(config.init_seed))
        self.post_init()
        # generators cannot be deep-copied, and clients copy models
        del self._init_generator

    @property
    def embedding_size(self) -> int:
        return self.head.in_features

    def forward(
        self,
        pixel_values: torch.Tensor,
        labels: Optional[torch.LongTensor] = None,
        output_hidden_states: Optional[bool] = None,
        return_dict: Optional[bool] = None,
    ) -> Union[Tuple, ImageClassifierOutput]:
        r"""
        labels (`torch.LongTensor` of shape `(batch_size,)`, *optional*):
            Labels for computing the mean softmax cross-entropy. Indices should be in `[0, ..., num_classes - 1]`.

        Returns:
            [`ImageClassifierOutput`] whose `hidden_states` holds the last-layer embedding (the input of the head)
            when `output_hidden_states=True`.
        """
        return_dict = return_dict if return_dict is not None else self.config.use_return_dict

        hidden_states = pixel_values
        for layer_idx, layer in enumerate(self.body):
            hidden_states = layer(hidden_states)
            if not torch.isfinite(hidden_states).all():
                raise NonFiniteError(f"Non-finite activation at layer {layer_idx} ({layer.__class__.__name__}).")
        embeddings = hidden_states
        logits = self.head(embeddings)
        if not torch.isfinite(logits).all():
            raise NonFiniteError(f"Non-finite activation at layer {len(self.body)} (head).")

        loss = None
        if labels is not None:
            if labels.shape[0] != logits.shape[0]:
                raise ValueError(f"Got {logits.shape[0]} images but {labels.shape[0]} labels.")
            if labels.numel() > 0 and (labels.min() < 0 or labels.max() >= self.config.num_classes):
                raise ValueError(f"Labels must lie in [0, {self.config.num_classes}).")
            loss = CrossEntropyLoss()(logits, labels)

        hidden = (embeddings,) if output_hidden_states else None
        if not return_dict:
            output = (logits,) + (hidden if hidden is not None else ())
            return ((loss,) + output) if loss is not None else output
        return ImageClassifierOutput(loss=loss, logits=logits, hidden_states=hidden)


def build_model(spec: FedCNNConfig, init_seed: int = 0) -> FedCNNForImageClassification:
    """Instantiate the backbone described by `spec` with a seeded initialization."""
    config = copy.deepcopy(spec)
    config.init_seed = init_seed
    model = FedCNNForImageClassification(config)
    logger.info(f"Built {config.architecture} backbone with {model.num_parameters()} parameters (seed {init_seed}).")
    return model


def flatten_params(model: nn.Module) -> ParameterVector:
    return ParameterVector(OrderedDict((name, p.detach().clone()) for name, p in model.named_parameters()))


def load_params(model: nn.Module, pv: ParameterVector, strict: bool = True) -> nn.Module:
    """
    Copy the values of `pv` into `model`. With `strict=False`, `pv` may hold a subset of the parameters (e.g. the
    body only) and the remaining parameters are left untouched.
    """
    params = OrderedDict(model.named_parameters())
    unknown = [name for name in pv.names if name not in params]
    if unknown:
        raise ValueError(f"Parameters {unknown} do not exist in the model.")
    if strict and pv.num_parameters != sum(p.numel() for p in params.values()):
        raise ValueError(
            f"Parameter count mismatch: model has {sum(p.numel() for p in params.values())}, "
            f"vector has {pv.num_parameters}."
        )
    if strict and len(pv.names) != len(params):
        raise ValueError(f"Expected {len(params)} parameter tensors, got {len(pv.names)}.")
    with torch.no_grad():
        for name, value in pv:
            if params[name].shape != value.shape:
                raise ValueError(f"Shape mismatch for {name}: {tuple(params[name].shape)} vs {tuple(value.shape)}.")
            params[name].copy_(value)
    return model


def split_body_head(model: nn.Module) -> BodyHeadSplit:
    names = [name for name, _ in model.named_parameters()]
    head = tuple(name for name in names if name.startswith(HEAD_PREFIX))
    body = tuple(name for name in names if not name.startswith(HEAD_PREFIX))
    return BodyHeadSplit(body=body, head=head)
