import copy
import logging
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from pfedpt import ParameterVector, PromptSpec, PromptState, flatten_params, init_prompt, load_params, split_body_head
from pfedpt.numerics import PROMPT_PARAMETER_NAME, sgd_epochs, sgd_step
from pfedpt.visual_prompt import prompt_grad_step


logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 512


def _anchor_seed(rng: Optional[torch.Generator]) -> Optional[int]:
    if rng is None:
        return None
    return int(torch.randint(0, 2**62, (1,), generator=rng))


@torch.no_grad()
def predict(
    model,
    images: torch.Tensor,
    prompt: Optional[PromptState] = None,
    rng: Optional[torch.Generator] = None,
    output_hidden_states: bool = False,
):
    """
    Argmax predictions (and last-layer embeddings) on `images`, prompted when a prompt is given. A patch-random
    prompt is placed at one anchor for the whole call, so results do not depend on the order of `images`.
    """
    model.eval()
    seed = _anchor_seed(rng)
    predictions, embeddings = [], []
    for start in range(0, images.shape[0], EVAL_BATCH_SIZE):
        batch_x = images[start : start + EVAL_BATCH_SIZE]
        if prompt is not None:
            anchor = torch.Generator().manual_seed(seed) if seed is not None else None
            batch_x = prompt.apply(batch_x, rng=anchor)
        outputs = model(pixel_values=batch_x, output_hidden_states=output_hidden_states, return_dict=True)
        predictions.append(outputs.logits.argmax(dim=-1))
        if output_hidden_states:
            embeddings.append(outputs.hidden_states[-1])
    model.train()
    predictions = torch.cat(predictions)
    if output_hidden_states:
        return predictions, torch.cat(embeddings)
    return predictions


def evaluate_client(
    model,
    test_x: torch.Tensor,
    test_y: torch.LongTensor,
    params: Optional[ParameterVector] = None,
    prompt: Optional[PromptState] = None,
    rng: Optional[torch.Generator] = None,
) -> float:
    """Fraction of argmax-correct predictions on the (prompted) test shard."""
    if test_y.numel() == 0:
        raise ValueError("Cannot evaluate on an empty test shard.")
    if params is not None:
        load_params(model, params)
    predictions = predict(model, test_x, prompt=prompt, rng=rng)
    return float((predictions == test_y).sum().item()) / test_y.numel()


def prompt_drift(previous: PromptState, current: PromptState) -> float:
    """Mean absolute change of the prompt over its mask support."""
    if previous.spec != current.spec:
        raise ValueError(f"Cannot compare prompts of different specs: {previous.spec} vs {current.spec}.")
    if previous.num_parameters == 0:
        return 0.0
    diff = current.parameter_values().to(torch.float64) - previous.parameter_values().to(torch.float64)
    return float(diff.abs().mean())


def drift_series(reports) -> List[Tuple[int, float]]:
    """`(round, mean_drift)` of every round report."""
    return [(report.round, report.mean_drift) for report in reports]


def pure_color_images(n_images: int, shape: Sequence[int], rng: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Constant images whose per-channel values are uniform in the normalized range [-1, 1]."""
    if n_images < 1:
        raise ValueError(f"The probe needs at least one image, got {n_images}.")
    channels, height, width = shape
    colors = torch.rand((n_images, channels, 1, 1), generator=rng, dtype=torch.float64) * 2 - 1
    return colors.expand(n_images, channels, height, width).to(dtype).contiguous()


def pure_color_probe(
    model,
    prompt: Optional[PromptState],
    n_images: int,
    shape: Sequence[int],
    rng: torch.Generator,
    params: Optional[ParameterVector] = None,
) -> np.ndarray:
    """Normalized histogram of the classes predicted for `n_images` prompted pure-color images."""
    if params is not None:
        load_params(model, params)
    dtype = next(model.parameters()).dtype
    images = pure_color_images(n_images, shape, rng, dtype=dtype)
    predictions = predict(model, images, prompt=prompt, rng=rng)
    counts = np.bincount(predictions.numpy(), minlength=model.config.num_classes).astype(np.float64)
    return counts / counts.sum()


def distribution_similarity(probe_hist, label_hist, metric: str = "cosine") -> float:
    """
    Similarity of two class histograms: cosine similarity, or `1 - total variation distance` with `metric="tv"`.
    """
    p = np.asarray(probe_hist, dtype=np.float64)
    q = np.asarray(label_hist, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"Histograms cover {p.size} and {q.size} classes.")
    if not p.any() or not q.any():
        raise ValueError("Cannot compare a zero histogram.")
    if metric == "cosine":
        return float(np.clip(np.dot(p, q) / (np.linalg.norm(p) * np.linalg.norm(q)), 0.0, 1.0))
    if metric == "tv":
        return float(1.0 - 0.5 * np.abs(p / p.sum() - q / q.sum()).sum())
    raise ValueError(f"Unknown similarity metric '{metric}', should be `cosine` or `tv`.")


def export_embeddings(
    model,
    prompt: Optional[PromptState],
    images: torch.Tensor,
    rng: Optional[torch.Generator] = None,
    params: Optional[ParameterVector] = None,
) -> torch.Tensor:
    """Last-layer embeddings (the input of the head) of the prompted `images`."""
    if params is not None:
        load_params(model, params)
    _, embeddings = predict(model, images, prompt=prompt, rng=rng, output_hidden_states=True)
    return embeddings


def prompt_distance_matrix(prompts: Dict[int, PromptState], label_histograms: Dict[int, np.ndarray]):
    """
    For every pair of clients, the mean absolute difference of their prompts and the total variation distance of
    their label distributions.
    """
    rows = []
    ids = sorted(prompts)
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            p = np.asarray(label_histograms[a], dtype=np.float64)
            q = np.asarray(label_histograms[b], dtype=np.float64)
            label_distance = 0.5 * float(np.abs(p / max(p.sum(), 1) - q / max(q.sum(), 1)).sum())
            rows.append((a, b, prompt_drift(prompts[a], prompts[b]), label_distance))
    return rows


def finetune_new_client(
    model,
    w: ParameterVector,
    train_x: torch.Tensor,
    train_y: torch.LongTensor,
    test_x: torch.Tensor,
    test_y: torch.LongTensor,
    prompt_spec: Optional[PromptSpec] = None,
    budget_samples: int = 400,
    epochs: int = 10,
    mode: str = "prompt-only",
    lr: Optional[float] = None,
    batch_size: int = 16,
    seed: int = 0,
) -> List[float]:
    """
    Adapt the aggregated backbone `w` to a client that never took part in training, using its first
    `budget_samples` train samples: a fresh zero prompt with the backbone frozen (`prompt-only`, default lr 1.0),
    or the final layer with the body frozen (`head-only`, default lr 0.01). Returns the test accuracy before
    adaptation followed by the accuracy after every epoch.
    """
    if budget_samples > train_y.numel():
        raise ValueError(f"Budget of {budget_samples} samples exceeds the {train_y.numel()} available.")
    if mode not in ("prompt-only", "head-only"):
        raise ValueError(f"Unknown fine-tuning mode '{mode}', should be `prompt-only` or `head-only`.")
    if mode == "prompt-only" and prompt_spec is None:
        raise ValueError("Prompt-only fine-tuning needs a prompt spec.")

    model = copy.deepcopy(model)
    load_params(model, w)
    dtype = next(model.parameters()).dtype
    train_x, train_y = train_x[:budget_samples].to(dtype), train_y[:budget_samples]
    test_x = test_x.to(dtype)
    generator = torch.Generator().manual_seed(seed)
    anchor = torch.Generator().manual_seed(seed + 1)

    prompt = None
    if mode == "prompt-only":
        prompt = init_prompt(prompt_spec, seed=seed).to(dtype)
        trainable = OrderedDict([(PROMPT_PARAMETER_NAME, prompt.delta)])
        lr = 1.0 if lr is None else lr

        def step_fn(grads):
            prompt_grad_step(prompt, grads, lr)

    else:
        head = set(split_body_head(model).head)
        trainable = OrderedDict((n, p) for n, p in model.named_parameters() if n in head)
        lr = 0.01 if lr is None else lr
        head_params = ParameterVector(trainable)

        def step_fn(grads):
            sgd_step(head_params, grads, lr)

    def accuracy():
        return evaluate_client(model, test_x, test_y, prompt=prompt, rng=torch.Generator().manual_seed(seed + 2))

    curve = [accuracy()]
    for epoch in range(epochs):
        sgd_epochs(
            model,
            train_x,
            train_y,
            trainable,
            step_fn=step_fn,
            epochs=1,
            batch_size=batch_size,
            generator=generator,
            prompt=prompt,
            prompt_rng=anchor,
        )
        curve.append(accuracy())
        logger.debug(f"New client {mode} epoch {epoch + 1}: accuracy {curve[-1]:.4f}")
    if mode == "prompt-only" and not flatten_params(model).equal(w.to(dtype)):
        raise RuntimeError("Prompt-only fine-tuning modified the backbone.")
    return curve

