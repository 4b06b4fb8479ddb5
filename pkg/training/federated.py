import copy
import logging
import math
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from pfedpt import (
    FedCNNConfig,
    ParameterVector,
    PromptSpec,
    PromptState,
    build_model,
    flatten_params,
    init_prompt,
    load_params,
    prompt_grad_step,
    sgd_step,
    split_body_head,
)
from pfedpt.numerics import DTYPES, PROMPT_PARAMETER_NAME, Gradients, forward_loss, sgd_epochs

from .arguments import TrainConfig
from .data import ClientShard, ImageDataset, shard_tensors
from .eval import evaluate_client, prompt_drift
from .utils import RoundReportWriter, log_metric, numpy_generator, torch_generator


logger = logging.getLogger(__name__)

BASE_ALGORITHMS = ("fedavg", "fedprox", "fedper", "fedrep", "local")
PT_BASES = ("fedavg", "fedprox", "fedper", "fedrep")
PT_SUFFIX = "+pt"


@dataclass(frozen=True)
class AlgorithmSpec:
    tag: str
    base: str
    uses_prompt: bool

    @property
    def decoupled(self) -> bool:
        return self.base in ("fedper", "fedrep")

    @property
    def aggregates(self) -> bool:
        return self.base != "local"


def attach_pt_plugin(base: str) -> str:
    """Tag of `base` with prompt training prepended to its local step and prompts applied at evaluation."""
    if base not in PT_BASES:
        raise ValueError(f"The prompt plugin supports {PT_BASES}, got '{base}'.")
    return f"{base}{PT_SUFFIX}"


def resolve_algorithm(tag: str) -> AlgorithmSpec:
    tag = tag.lower()
    if tag == "pfedpt":
        return AlgorithmSpec(tag=tag, base="fedavg", uses_prompt=True)
    if tag.endswith(PT_SUFFIX):
        base = tag[: -len(PT_SUFFIX)]
        attach_pt_plugin(base)
        return AlgorithmSpec(tag=tag, base=base, uses_prompt=True)
    if tag in BASE_ALGORITHMS:
        return AlgorithmSpec(tag=tag, base=tag, uses_prompt=False)
    raise ValueError(
        f"Unknown algorithm '{tag}', should be `pfedpt`, one of {BASE_ALGORITHMS} or `<base>{PT_SUFFIX}`."
    )


@dataclass
class FederatedData:
    """The datasets and their split among clients."""

    train: ImageDataset
    test: ImageDataset
    shards: List[ClientShard]


@dataclass
class ClientState:
    """
    Everything that stays on one client: its data, its prompt (prompted algorithms), its private head (FedPer and
    FedRep) or its whole model (Local). None of it is ever part of an upload.
    """

    client_id: int
    shard: ClientShard
    train_x: torch.Tensor
    train_y: torch.LongTensor
    test_x: torch.Tensor
    test_y: torch.LongTensor
    prompt: Optional[PromptState] = None
    head: Optional[ParameterVector] = None
    model: Optional[ParameterVector] = None
    train_loss: Optional[float] = None

    @property
    def num_samples(self) -> int:
        return int(self.train_y.shape[0])

    def generator(self, seed: int, stream: str, round_idx: int) -> torch.Generator:
        """Per-client stream derived from `(seed, stream, client_id, round)`."""
        return torch_generator(seed, stream, self.client_id, round_idx)


@dataclass
class RoundReport:
    round: int
    sampled: List[int]
    train_loss: Dict[int, float] = field(default_factory=dict)
    test_acc: Dict[int, float] = field(default_factory=dict)
    weighted_acc: float = 0.0
    prompt_drift: Dict[int, float] = field(default_factory=dict)
    mean_drift: float = 0.0
    weights: Dict[int, float] = field(default_factory=dict)
    upload_sizes: Dict[int, int] = field(default_factory=dict)
    wall_time: float = 0.0


def sample_clients(num_clients: int, fraction: float, round_rng: np.random.Generator) -> List[int]:
    """`round(N * fraction)` distinct client ids, uniform without replacement, in increasing order."""
    if not 0 < fraction <= 1:
        raise ValueError(f"Sample fraction must lie in (0, 1], got {fraction}.")
    k = max(1, int(math.floor(num_clients * fraction + 0.5)))
    if k >= num_clients:
        return list(range(num_clients))
    return sorted(int(i) for i in round_rng.choice(num_clients, size=k, replace=False))


def aggregate(models: Sequence[ParameterVector], weights: Sequence[float]) -> ParameterVector:
    """
    `sum_k weight_k * w_k` with the weights renormalized to sum to one. Accumulates in float64, in the given
    order, and casts back to the dtype of the inputs.
    """
    if len(models) != len(weights):
        raise ValueError(f"Got {len(models)} models but {len(weights)} weights.")
    if not models:
        raise ValueError("Cannot aggregate an empty set of models.")
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError(f"Aggregation weights must be finite and non-negative, got {weights.tolist()}.")
    total = weights.sum()
    if total <= 0:
        raise ValueError("Aggregation weights are all zero.")
    names = models[0].names
    for pv in models[1:]:
        if pv.names != names or pv.num_parameters != models[0].num_parameters:
            raise ValueError("Cannot aggregate parameter vectors of different layouts.")

    result = OrderedDict()
    for name in names:
        acc = torch.zeros_like(models[0][name], dtype=torch.float64)
        for pv, weight in zip(models, weights):
            acc.add_(pv[name].to(torch.float64), alpha=float(weight / total))
        result[name] = acc.to(models[0][name].dtype)
    return ParameterVector(result)


def _model_step(trainable: "OrderedDict[str, torch.Tensor]", lr: float) -> Callable[[Gradients], None]:
    params = ParameterVector(trainable)

    def step(grads: Gradients):
        sgd_step(params, grads, lr)

    return step


def _named(model, names=None) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((n, p) for n, p in model.named_parameters() if names is None or n in names)


def _phase_loss(losses: List[float], model, state: ClientState, prompt: Optional[PromptState], seed: int, round_idx: int):
    if losses:
        return float(np.mean(losses))
    rng = state.generator(seed, "anchor-eval", round_idx)
    return forward_loss(model, state.train_x, state.train_y, prompt=prompt, rng=rng, record=False).value


def _prompt_phase(model, state: ClientState, cfg: TrainConfig, round_idx: int) -> List[float]:
    """E_g epochs of SGD on the prompt with the backbone frozen."""
    if state.prompt is None or cfg.prompt_epochs == 0:
        return []
    trainable = OrderedDict([(PROMPT_PARAMETER_NAME, state.prompt.delta)])
    return sgd_epochs(
        model,
        state.train_x,
        state.train_y,
        trainable,
        step_fn=lambda grads: prompt_grad_step(state.prompt, grads, cfg.prompt_lr),
        epochs=cfg.prompt_epochs,
        batch_size=cfg.batch_size,
        generator=state.generator(cfg.seed, "prompt", round_idx),
        prompt=state.prompt,
        prompt_rng=state.generator(cfg.seed, "anchor-prompt", round_idx),
    )


def _backbone_phase(
    model,
    state: ClientState,
    cfg: TrainConfig,
    round_idx: int,
    names=None,
    epochs: Optional[int] = None,
    lr: Optional[float] = None,
    stream: str = "backbone",
    prompt: Optional[PromptState] = None,
    grad_hook=None,
) -> List[float]:
    trainable = _named(model, names)
    return sgd_epochs(
        model,
        state.train_x,
        state.train_y,
        trainable,
        step_fn=_model_step(trainable, cfg.backbone_lr if lr is None else lr),
        epochs=cfg.backbone_epochs if epochs is None else epochs,
        batch_size=cfg.batch_size,
        generator=state.generator(cfg.seed, stream, round_idx),
        prompt=prompt,
        prompt_rng=state.generator(cfg.seed, f"anchor-{stream}", round_idx),
        grad_hook=grad_hook,
    )


def local_train_fedavg(
    state: ClientState,
    w: ParameterVector,
    cfg: TrainConfig,
    model,
    round_idx: int = 0,
    use_prompt: bool = False,
    proximal_mu: float = 0.0,
) -> ParameterVector:
    """E_b epochs of minibatch SGD on the backbone, on prompted inputs when `use_prompt`."""
    load_params(model, w)
    prompt = state.prompt if use_prompt else None
    grad_hook = None
    if proximal_mu > 0:
        anchor = w.clone()
        params = _named(model)

        def grad_hook(grads: Gradients) -> Gradients:
            # gradient of (mu / 2) ||w - w_global||^2
            return Gradients(
                OrderedDict((n, g + proximal_mu * (params[n].detach() - anchor[n])) for n, g in grads)
            )

    losses = _backbone_phase(model, state, cfg, round_idx, prompt=prompt, grad_hook=grad_hook)
    state.train_loss = _phase_loss(losses, model, state, prompt, cfg.seed, round_idx)
    return flatten_params(model)


def local_train_fedprox(
    state: ClientState, w_global: ParameterVector, cfg: TrainConfig, model, round_idx: int = 0, use_prompt: bool = False
) -> ParameterVector:
    """FedAvg local training with the proximal term `(mu / 2) ||w - w_global||^2` added to the loss."""
    return local_train_fedavg(
        state, w_global, cfg, model, round_idx=round_idx, use_prompt=use_prompt, proximal_mu=cfg.proximal_mu
    )


def local_train_decoupled(
    state: ClientState,
    w_body: ParameterVector,
    cfg: TrainConfig,
    model,
    variant: str = "fedper",
    round_idx: int = 0,
    use_prompt: bool = False,
) -> ParameterVector:
    """
    FedPer trains body and private head jointly; FedRep first trains the head with the body frozen (`head_epochs`
    at `head_lr`), then the body with the head frozen. Only the body is returned for upload.
    """
    if variant not in ("fedper", "fedrep"):
        raise ValueError(f"Unknown decoupled variant '{variant}', should be `fedper` or `fedrep`.")
    split = split_body_head(model)
    load_params(model, w_body, strict=False)
    if state.head is not None:
        load_params(model, state.head, strict=False)
    prompt = state.prompt if use_prompt else None

    if variant == "fedper":
        losses = _backbone_phase(model, state, cfg, round_idx, prompt=prompt)
    else:
        losses = _backbone_phase(
            model,
            state,
            cfg,
            round_idx,
            names=set(split.head),
            epochs=cfg.head_epochs,
            lr=cfg.head_lr,
            stream="head",
            prompt=prompt,
        )
        if cfg.backbone_epochs > 0:
            losses = _backbone_phase(model, state, cfg, round_idx, names=set(split.body), prompt=prompt)
    state.train_loss = _phase_loss(losses, model, state, prompt, cfg.seed, round_idx)

    params = flatten_params(model)
    state.head = params.select(split.head)
    return params.select(split.body)


def local_train_pfedpt(
    state: ClientState, w: ParameterVector, cfg: TrainConfig, model, round_idx: int = 0, base: str = "fedavg"
) -> ParameterVector:
    """
    Prompt phase (E_g epochs on the prompt at `prompt_lr`, backbone frozen) followed by the backbone phase of
    `base` (E_b epochs at `backbone_lr`, prompt frozen), both on the prompted loss. Returns the backbone (or body).
    """
    if state.prompt is None:
        raise ValueError(f"Client {state.client_id} has no prompt.")
    load_params(model, w, strict=False)
    if base in ("fedper", "fedrep") and state.head is not None:
        load_params(model, state.head, strict=False)
    _prompt_phase(model, state, cfg, round_idx)

    if base == "fedavg":
        return local_train_fedavg(state, w, cfg, model, round_idx=round_idx, use_prompt=True)
    if base == "fedprox":
        return local_train_fedprox(state, w, cfg, model, round_idx=round_idx, use_prompt=True)
    if base in ("fedper", "fedrep"):
        return local_train_decoupled(state, w, cfg, model, variant=base, round_idx=round_idx, use_prompt=True)
    raise ValueError(f"The prompt plugin does not support '{base}'.")


def local_train(
    algorithm: AlgorithmSpec, state: ClientState, w: ParameterVector, cfg: TrainConfig, model, round_idx: int
) -> ParameterVector:
    if algorithm.uses_prompt:
        return local_train_pfedpt(state, w, cfg, model, round_idx=round_idx, base=algorithm.base)
    if algorithm.base == "fedavg":
        return local_train_fedavg(state, w, cfg, model, round_idx=round_idx)
    if algorithm.base == "fedprox":
        return local_train_fedprox(state, w, cfg, model, round_idx=round_idx)
    if algorithm.decoupled:
        return local_train_decoupled(state, w, cfg, model, variant=algorithm.base, round_idx=round_idx)
    # local: the client's own model is both start and result
    state.model = local_train_fedavg(state, state.model, cfg, model, round_idx=round_idx)
    return state.model


class FederatedSimulation:
    """
    Server loop of one algorithm: sample, broadcast, train locally, aggregate, then evaluate every client. Clients
    listed in `holdout` keep a shard but are never sampled nor evaluated (used for new-client adaptation).
    """

    def __init__(
        self,
        cfg: TrainConfig,
        data: FederatedData,
        model_spec: FedCNNConfig,
        prompt_spec: Optional[PromptSpec] = None,
        algorithm: Optional[str] = None,
        holdout: Sequence[int] = (),
        accelerator=None,
    ):
        self.cfg = cfg
        self.algorithm = resolve_algorithm(algorithm or cfg.algorithm)
        self.accelerator = accelerator
        self.dtype = DTYPES[cfg.dtype]
        torch.set_num_threads(cfg.num_threads)

        self.template = build_model(model_spec, init_seed=model_spec.init_seed).to(self.dtype)
        self.split = split_body_head(self.template)
        self.initial_params = flatten_params(self.template)
        self.global_params = self.initial_params.clone()

        if self.algorithm.uses_prompt and prompt_spec is None:
            raise ValueError(f"Algorithm '{self.algorithm.tag}' needs a prompt spec.")
        self.prompt_spec = prompt_spec if self.algorithm.uses_prompt else None

        holdout = set(holdout)
        self.clients: List[ClientState] = []
        self.holdout: List[ClientState] = []
        for shard in data.shards:
            train_x, train_y = shard_tensors(data.train, shard.train_indices)
            test_x, test_y = shard_tensors(data.test, shard.test_indices)
            state = ClientState(
                client_id=shard.client_id,
                shard=shard,
                train_x=train_x.to(self.dtype),
                train_y=train_y,
                test_x=test_x.to(self.dtype),
                test_y=test_y,
            )
            if shard.client_id in holdout:
                self.holdout.append(state)
                continue
            if self.prompt_spec is not None:
                state.prompt = init_prompt(self.prompt_spec, seed=cfg.seed, owner=shard.client_id).to(self.dtype)
            if self.algorithm.decoupled:
                state.head = self.initial_params.select(self.split.head).clone()
            if not self.algorithm.aggregates:
                state.model = self.initial_params.clone()
            self.clients.append(state)
        self.clients.sort(key=lambda c: c.client_id)
        if cfg.num_clients is not None and len(self.clients) != cfg.num_clients:
            raise ValueError(f"Configured {cfg.num_clients} clients but the partition has {len(self.clients)}.")
        self.reports: List[RoundReport] = []

    @property
    def tag(self) -> str:
        return self.algorithm.tag

    def client_params(self, state: ClientState) -> ParameterVector:
        """The full backbone client `state` evaluates with."""
        if not self.algorithm.aggregates:
            return state.model
        if self.algorithm.decoupled:
            return self.global_params.merge(state.head)
        return self.global_params

    def _train_client(self, state: ClientState, broadcast: ParameterVector, round_idx: int):
        model = copy.deepcopy(self.template)
        previous = state.prompt.clone() if state.prompt is not None else None
        upload = local_train(self.algorithm, state, broadcast, self.cfg, model, round_idx)
        drift = prompt_drift(previous, state.prompt) if previous is not None else 0.0
        return state.client_id, upload, state.train_loss, drift

    def _evaluate(self, round_idx: int) -> Dict[int, float]:
        model = copy.deepcopy(self.template)
        accuracies = {}
        for state in self.clients:
            accuracies[state.client_id] = evaluate_client(
                model,
                state.test_x,
                state.test_y,
                params=self.client_params(state),
                prompt=state.prompt,
                rng=state.generator(self.cfg.seed, "anchor-eval", round_idx),
            )
        return accuracies

    def run_round(self, round_idx: int, executor: Optional[ThreadPoolExecutor] = None) -> RoundReport:
        start = time.perf_counter()
        num_clients = len(self.clients)
        sampled_ids = sample_clients(
            num_clients, self.cfg.sample_fraction, numpy_generator(self.cfg.seed, "sample", round_idx)
        )
        sampled = [self.clients[i] for i in sampled_ids]
        if self.algorithm.decoupled:
            broadcast = self.global_params.select(self.split.body)
        else:
            broadcast = self.global_params

        jobs = [(state, broadcast, round_idx) for state in sampled]
        if executor is not None:
            results = list(executor.map(lambda job: self._train_client(*job), jobs))
        else:
            results = [self._train_client(*job) for job in jobs]
        results.sort(key=lambda r: r[0])

        report = RoundReport(round=round_idx, sampled=[state.client_id for state in sampled])
        sizes = {state.client_id: state.num_samples for state in sampled}
        total = sum(sizes.values())
        for client_id, upload, train_loss, drift in results:
            report.train_loss[client_id] = train_loss
            report.prompt_drift[client_id] = drift
            report.weights[client_id] = sizes[client_id] / total
            report.upload_sizes[client_id] = upload.num_parameters if self.algorithm.aggregates else 0

        if self.algorithm.aggregates:
            aggregated = aggregate([r[1] for r in results], [sizes[r[0]] for r in results])
            self.global_params = self.global_params.merge(aggregated)

        report.test_acc = self._evaluate(round_idx)
        all_sizes = np.array([state.num_samples for state in self.clients], dtype=np.float64)
        accs = np.array([report.test_acc[state.client_id] for state in self.clients], dtype=np.float64)
        weighted = float(np.dot(all_sizes, accs) / all_sizes.sum())
        report.weighted_acc = min(max(weighted, float(accs.min())), float(accs.max()))
        report.mean_drift = float(np.mean(list(report.prompt_drift.values()))) if report.prompt_drift else 0.0
        report.wall_time = time.perf_counter() - start
        return report

    def run(self, report_path: Optional[str] = None, record_wall_time: bool = False) -> List[RoundReport]:
        writer = RoundReportWriter(report_path, record_wall_time) if report_path is not None else None
        executor = ThreadPoolExecutor(max_workers=self.cfg.num_workers) if self.cfg.num_workers > 1 else None
        try:
            for round_idx in tqdm(range(1, self.cfg.rounds + 1), desc=self.tag, disable=self.cfg.rounds == 0):
                report = self.run_round(round_idx, executor)
                self.reports.append(report)
                if writer is not None:
                    writer.write(report)
                losses = [v for v in report.train_loss.values() if v is not None]
                logger.info(
                    f"[{self.tag}] round {round_idx}: sampled {report.sampled}, "
                    f"train loss {np.mean(losses) if losses else float('nan'):.4f}, "
                    f"weighted acc {report.weighted_acc:.4f}, mean drift {report.mean_drift:.6f}"
                )
                log_metric(
                    self.accelerator,
                    {
                        f"{self.tag}/loss": float(np.mean(losses)) if losses else 0.0,
                        f"{self.tag}/weighted_acc": report.weighted_acc,
                        f"{self.tag}/mean_drift": report.mean_drift,
                    },
                    step=round_idx,
                    train_time=report.wall_time,
                    prefix="train",
                )
        except Exception:
            logger.error(f"[{self.tag}] failed after {len(self.reports)} rounds; completed rounds were kept.")
            raise
        finally:
            if executor is not None:
                executor.shutdown(wait=True)
            if writer is not None:
                writer.close()
        return self.reports


def run_experiment(
    cfg: TrainConfig,
    data: FederatedData,
    model_spec: FedCNNConfig,
    prompt_spec: Optional[PromptSpec] = None,
    algorithm: Optional[str] = None,
    report_path: Optional[str] = None,
) -> List[RoundReport]:
    """T rounds of `algorithm` (defaults to `cfg.algorithm`); returns one report per round."""
    simulation = FederatedSimulation(cfg, data, model_spec, prompt_spec, algorithm=algorithm)
    return simulation.run(report_path=report_path)
