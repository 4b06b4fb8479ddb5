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
""" Loss, gradients and plain SGD for backbones and prompts, with a finite-difference oracle."""
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, Iterator, List, Optional, Tuple

import torch
import torch.nn as nn
from torch.utils.data import DataLoader, TensorDataset
from transformers.utils import logging


if TYPE_CHECKING:
    from .modeling_fed_cnn import ParameterVector
    from .visual_prompt import PromptState

logger = logging.get_logger(__name__)

PROMPT_PARAMETER_NAME = "prompt.delta"
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteError(ArithmeticError):
    """Raised when an activation, loss or gradient stops being finite."""


@dataclass
class Gradients:
    """Per-parameter gradient tensors, aligned one-to-one with the parameter names they were taken against."""

    tensors: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(self.tensors.keys())

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tuple[str, torch.Tensor]]:
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def select(self, names) -> "Gradients":
        names = set(names)
        return Gradients(OrderedDict((k, v) for k, v in self.tensors.items() if k in names))


@dataclass
class LossContext:
    """
    Result of `forward_loss`: the mean cross-entropy `loss`, the `logits` of shape `(batch, num_classes)` and the
    leaf tensors the autograd graph was recorded against.
    """

    loss: torch.Tensor
    logits: torch.Tensor
    parameters: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    consumed: bool = False

    @property
    def value(self) -> float:
        return float(self.loss.detach())


def trainable_parameters(model: nn.Module, prompt: Optional["PromptState"] = None) -> "OrderedDict[str, torch.Tensor]":
    params = OrderedDict((name, p) for name, p in model.named_parameters() if p.requires_grad)
    if prompt is not None:
        params[PROMPT_PARAMETER_NAME] = prompt.delta
    return params


def forward_loss(
    model: nn.Module,
    batch_x: torch.Tensor,
    batch_y: torch.LongTensor,
    prompt: Optional["PromptState"] = None,
    rng: Optional[torch.Generator] = None,
    record: bool = True,
) -> LossContext:
    """
    Mean softmax cross-entropy of `model` on a batch, optionally on prompted inputs `x + M * delta`. With
    `record=True` the autograd graph is kept so that `backward` can be called on the result.
    """
    if batch_x.shape[0] != batch_y.shape[0]:
        raise ValueError(f"Batch has {batch_x.shape[0]} images but {batch_y.shape[0]} labels.")

    with torch.set_grad_enabled(record):
        if prompt is not None:
            if record:
                prompt.delta.requires_grad_(True)
            batch_x = prompt.apply(batch_x, rng=rng)
        outputs = model(pixel_values=batch_x, labels=batch_y, return_dict=True)
    if not torch.isfinite(outputs.loss):
        raise NonFiniteError(f"Non-finite loss {float(outputs.loss.detach())}.")
    parameters = trainable_parameters(model, prompt) if record else OrderedDict()
    return LossContext(loss=outputs.loss, logits=outputs.logits, parameters=parameters)


def backward(
    model: nn.Module,
    context: Optional[LossContext],
    parameters: Optional["OrderedDict[str, torch.Tensor]"] = None,
) -> Gradients:
    """
    Reverse-mode gradients of the recorded loss. Defaults to every trainable parameter of `model` (plus the prompt
    when one was attached); pass `parameters` to restrict the computation, e.g. to the prompt only.
    """
    if context is None or context.consumed or not context.loss.requires_grad:
        raise RuntimeError("`backward` was called without a recorded forward pass.")
    targets = parameters if parameters is not None else context.parameters
    if not targets:
        raise ValueError("No parameters to differentiate against.")

    grads = torch.autograd.grad(context.loss, list(targets.values()), allow_unused=True)
    context.consumed = True

    tensors = OrderedDict()
    for (name, param), grad in zip(targets.items(), grads):
        # parameters the loss does not depend on get an exactly-zero block
        grad = torch.zeros_like(param) if grad is None else grad.detach()
        if not torch.isfinite(grad).all():
            raise NonFiniteError(f"Non-finite gradient for {name}.")
        tensors[name] = grad
    return Gradients(tensors)


def sgd_step(params: "ParameterVector", grads: Gradients, lr: float) -> "ParameterVector":
    """In-place plain SGD `p <- p - lr * g` (no momentum, no weight decay). Returns `params`."""
    if lr < 0:
        raise ValueError(f"Learning rate must be non-negative, got {lr}.")
    if tuple(params.names) != tuple(grads.names):
        raise ValueError(f"Gradients {list(grads.names)} are not aligned with parameters {list(params.names)}.")
    for name, grad in grads:
        if not torch.isfinite(grad).all():
            raise NonFiniteError(f"Non-finite gradient for {name}.")
    if lr == 0:
        return params
    with torch.no_grad():
        for name, param in params:
            param.add_(grads[name], alpha=-lr)
    return params


def central_difference(
    loss_fn: Callable[[], float], parameters: "OrderedDict[str, torch.Tensor]", eps: float
) -> Gradients:
    """`(L(p + eps) - L(p - eps)) / 2 eps` for every entry of every tensor in `parameters`."""
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}.")
    tensors = OrderedDict()
    with torch.no_grad():
        for name, param in parameters.items():
            flat = param.view(-1)
            estimate = torch.zeros(flat.numel(), dtype=torch.float64)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + eps
                loss_plus = loss_fn()
                flat[i] = original - eps
                loss_minus = loss_fn()
                flat[i] = original
                estimate[i] = (loss_plus - loss_minus) / (2 * eps)
            tensors[name] = estimate.reshape(param.shape).to(param.dtype)
    return Gradients(tensors)


def finite_diff_grad(
    model: nn.Module,
    batch_x: torch.Tensor,
    batch_y: torch.LongTensor,
    eps: float = 1e-3,
    prompt: Optional["PromptState"] = None,
    rng_seed: Optional[int] = None,
) -> Gradients:
    """
    Central-difference estimate of the gradient of `forward_loss` w.r.t. every trainable parameter (and the prompt,
    when attached). Requires the 64-bit mode: the model, the inputs and the prompt must all be float64.
    """
    params = trainable_parameters(model, prompt)
    if any(p.dtype != torch.float64 for p in params.values()) or batch_x.dtype != torch.float64:
        raise ValueError("`finite_diff_grad` requires float64 parameters and inputs.")

    def loss_fn() -> float:
        rng = torch.Generator().manual_seed(rng_seed) if rng_seed is not None else None
        return forward_loss(model, batch_x, batch_y, prompt=prompt, rng=rng, record=False).value

    return central_difference(loss_fn, params, eps)


def max_relative_error(estimate: Gradients, reference: Gradients, floor: float = 1e-6) -> Dict[str, float]:
    """Max over entries of `|a - b| / max(|a|, |b|, floor)`, per parameter."""
    errors = {}
    for name, ref in reference:
        est = estimate[name].to(torch.float64)
        ref = ref.to(torch.float64)
        denom = torch.maximum(torch.maximum(est.abs(), ref.abs()), torch.full_like(ref, floor))
        errors[name] = float(((est - ref).abs() / denom).max()) if ref.numel() else 0.0
    return errors


def sgd_epochs(
    model: nn.Module,
    images: torch.Tensor,
    labels: torch.LongTensor,
    trainable: "OrderedDict[str, torch.Tensor]",
    step_fn: Callable[[Gradients], None],
    epochs: int,
    batch_size: int,
    generator: torch.Generator,
    prompt: Optional["PromptState"] = None,
    prompt_rng: Optional[torch.Generator] = None,
    grad_hook: Optional[Callable[[Gradients], Gradients]] = None,
) -> List[float]:
    """
    `epochs` passes of shuffled minibatch SGD over `(images, labels)`, differentiating only against `trainable`.
    `step_fn` applies the update (`sgd_step` or `prompt_grad_step`); `grad_hook` may rewrite the gradients first.
    Returns the data loss of every minibatch.
    """
    losses = []
    for _ in range(epochs):
        loader = DataLoader(TensorDataset(images, labels), batch_size=batch_size, shuffle=True, generator=generator)
        for batch_x, batch_y in loader:
            context = forward_loss(model, batch_x, batch_y, prompt=prompt, rng=prompt_rng)
            grads = backward(model, context, parameters=trainable)
            if grad_hook is not None:
                grads = grad_hook(grads)
            step_fn(grads)
            losses.append(context.value)
    return losses
