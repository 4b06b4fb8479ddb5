import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from transformers import HfArgumentParser

from pfedpt import FedCNNConfig, PromptSpec
from pfedpt.visual_prompt import PROMPT_MODES, PROMPT_TEMPLATES

from .data import PARTITION_SCHEMES, PartitionConfig
from .utils import config_hash, derive_seed, list_field


DATASET_SOURCES = ("cifar10", "cifar100", "synthetic")
SIMILARITY_METRICS = ("cosine", "tv")
FINETUNE_MODES = ("prompt-only", "head-only")


@dataclass
class DatasetArguments:
    """
    Arguments pertaining to what data we are going to federate.
    """

    source: str = field(
        default="cifar10",
        metadata={"help": "One of `cifar10`, `cifar100` or `synthetic`."},
    )
    path: Optional[str] = field(
        default_factory=lambda: os.environ.get("PFEDPT_DATA_ROOT"),
        metadata={
            "help": "Directory holding the CIFAR binary batch files. Defaults to the `PFEDPT_DATA_ROOT` environment "
            "variable."
        },
    )
    normalize: bool = field(
        default=True,
        metadata={"help": "Whether to map CIFAR pixels to [-1, 1] with mean and std 0.5 per channel."},
    )
    classes: int = field(default=10, metadata={"help": "Number of classes of the synthetic dataset."})
    shape: List[int] = list_field(
        default=[3, 32, 32], metadata={"help": "Image shape (C, H, W) of the synthetic dataset."}
    )
    n_per_class: int = field(default=600, metadata={"help": "Synthetic train samples per class."})
    n_test_per_class: Optional[int] = field(
        default=None, metadata={"help": "Synthetic test samples per class. Defaults to `n_per_class`."}
    )
    noise_sigma: float = field(default=1.0, metadata={"help": "Std of the Gaussian noise added to each template."})
    seed: Optional[int] = field(
        default=None, metadata={"help": "Synthetic dataset seed. Derived from `train.seed` when omitted."}
    )

    def __post_init__(self):
        if self.source not in DATASET_SOURCES:
            raise ValueError(f"dataset.source: unknown source '{self.source}', should be one of {DATASET_SOURCES}.")
        if self.source == "synthetic":
            if self.classes < 2:
                raise ValueError(f"dataset.classes: a synthetic dataset needs at least 2 classes, got {self.classes}.")
            if len(self.shape) != 3 or min(self.shape) <= 0:
                raise ValueError(f"dataset.shape: expected a positive (C, H, W), got {self.shape}.")
            if self.n_per_class < 1:
                raise ValueError(f"dataset.n_per_class: must be positive, got {self.n_per_class}.")
            if self.noise_sigma < 0:
                raise ValueError(f"dataset.noise_sigma: must be non-negative, got {self.noise_sigma}.")

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        if self.source == "synthetic":
            return tuple(self.shape)
        return (3, 32, 32)

    @property
    def num_classes(self) -> int:
        return {"cifar10": 10, "cifar100": 100}.get(self.source, self.classes)


@dataclass
class PartitionArguments:
    """
    Arguments pertaining to how the training set is split among clients.
    """

    scheme: str = field(default="dirichlet", metadata={"help": "One of `iid`, `dirichlet` or `pathological`."})
    alpha: float = field(default=0.3, metadata={"help": "Concentration of the per-class Dirichlet draws."})
    classes_per_client: int = field(default=5, metadata={"help": "Classes held by each client (pathological)."})
    num_clients: int = field(default=50, metadata={"help": "Number of clients N."})
    seed: Optional[int] = field(
        default=None, metadata={"help": "Partition seed. Derived from `train.seed` when omitted."}
    )
    min_samples: int = field(default=10, metadata={"help": "Minimum number of train samples per client."})
    max_retries: int = field(default=100, metadata={"help": "Resampling budget to honour `min_samples`."})

    def __post_init__(self):
        if self.scheme not in PARTITION_SCHEMES:
            raise ValueError(f"partition.scheme: unknown scheme '{self.scheme}', should be one of {PARTITION_SCHEMES}.")
        if self.alpha <= 0:
            raise ValueError(f"partition.alpha: alpha must be positive, got {self.alpha}.")
        if self.num_clients < 1:
            raise ValueError(f"partition.num_clients: must be at least 1, got {self.num_clients}.")
        if self.classes_per_client < 1:
            raise ValueError(f"partition.classes_per_client: must be at least 1, got {self.classes_per_client}.")
        if self.min_samples < 1 or self.max_retries < 1:
            raise ValueError("partition.min_samples and partition.max_retries must be at least 1.")

    def to_partition_config(self, num_clients: Optional[int] = None) -> PartitionConfig:
        return PartitionConfig(
            scheme=self.scheme,
            num_clients=self.num_clients if num_clients is None else num_clients,
            alpha=self.alpha,
            classes_per_client=self.classes_per_client,
            seed=self.seed,
            min_samples=self.min_samples,
            max_retries=self.max_retries,
        )


@dataclass
class ModelArguments:
    """
    Arguments pertaining to the shared backbone.
    """

    architecture: str = field(default="cnn-paper", metadata={"help": "One of `cnn-paper` or `mlp-tiny`."})
    num_classes: Optional[int] = field(
        default=None, metadata={"help": "Number of output classes. Defaults to the dataset's."}
    )
    conv_channels: int = field(default=64, metadata={"help": "Filters of both convolutions (`cnn-paper`)."})
    kernel_size: int = field(default=5, metadata={"help": "Kernel size of both convolutions (`cnn-paper`)."})
    hidden_sizes: Optional[List[int]] = field(
        default=None,
        metadata={"help": "Hidden fully connected widths. Defaults to [394, 192] (`cnn-paper`) or [32] (`mlp-tiny`)."},
    )
    init_seed: Optional[int] = field(
        default=None, metadata={"help": "Backbone initialization seed. Derived from `train.seed` when omitted."}
    )

    def __post_init__(self):
        if self.architecture not in ("cnn-paper", "mlp-tiny"):
            raise ValueError(f"model.architecture: unknown architecture '{self.architecture}'.")
        if self.num_classes is not None and self.num_classes < 2:
            raise ValueError(f"model.num_classes: must be at least 2, got {self.num_classes}.")
        if self.conv_channels < 1 or self.kernel_size < 1:
            raise ValueError("model.conv_channels and model.kernel_size must be positive.")


@dataclass
class PromptArguments:
    """
    Arguments pertaining to the client visual prompts.
    """

    template: str = field(
        default="padding", metadata={"help": "One of `padding`, `patch-fixed` or `patch-random`."}
    )
    size: int = field(default=4, metadata={"help": "Prompt size p, in pixels."})
    mode: str = field(
        default="add", metadata={"help": "`add` adds the prompt to the masked pixels, `replace` overwrites them."}
    )

    def __post_init__(self):
        if self.template not in PROMPT_TEMPLATES:
            raise ValueError(f"prompt.template: unknown template '{self.template}', should be one of {PROMPT_TEMPLATES}.")
        if self.mode not in PROMPT_MODES:
            raise ValueError(f"prompt.mode: unknown mode '{self.mode}', should be one of {PROMPT_MODES}.")
        if self.size < 0:
            raise ValueError(f"prompt.size: must be non-negative, got {self.size}.")


@dataclass
class TrainConfig:
    """
    Hyperparameters of the federated rounds and of every local training algorithm.
    """

    algorithm: str = field(
        default="pfedpt",
        metadata={
            "help": "One of `pfedpt`, `fedavg`, `fedprox`, `fedper`, `fedrep`, `local`, or a base algorithm with the "
            "prompt plugin attached, e.g. `fedprox+pt`."
        },
    )
    compare_algorithms: List[str] = list_field(
        default=[], metadata={"help": "Extra algorithms run on the same partition and initial backbone."}
    )
    rounds: int = field(default=150, metadata={"help": "Number of communication rounds T."})
    num_clients: Optional[int] = field(
        default=None, metadata={"help": "Number of clients N. Defaults to `partition.num_clients`."}
    )
    sample_fraction: float = field(default=0.2, metadata={"help": "Fraction of the clients sampled each round."})
    batch_size: int = field(default=16, metadata={"help": "Local minibatch size."})
    backbone_epochs: int = field(default=5, metadata={"help": "Local backbone epochs E_b."})
    prompt_epochs: int = field(default=5, metadata={"help": "Local prompt epochs E_g."})
    backbone_lr: float = field(default=0.005, metadata={"help": "Backbone SGD learning rate."})
    prompt_lr: float = field(default=1.0, metadata={"help": "Prompt SGD learning rate."})
    proximal_mu: float = field(default=1e-4, metadata={"help": "Proximal coefficient of FedProx."})
    head_lr: float = field(default=0.01, metadata={"help": "Learning rate of the private head (FedRep)."})
    head_epochs: int = field(default=1, metadata={"help": "Epochs of private head training (FedRep)."})
    seed: int = field(default=0, metadata={"help": "Global seed every other seed is derived from."})
    num_workers: int = field(default=1, metadata={"help": "Clients trained concurrently within a round."})
    num_threads: int = field(default=1, metadata={"help": "Torch intra-op threads."})
    dtype: str = field(default="float32", metadata={"help": "`float32`, or `float64` for verification runs."})

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError(f"train.rounds: must be non-negative, got {self.rounds}.")
        if not 0 < self.sample_fraction <= 1:
            raise ValueError(f"train.sample_fraction: must lie in (0, 1], got {self.sample_fraction}.")
        if self.batch_size < 1:
            raise ValueError(f"train.batch_size: must be positive, got {self.batch_size}.")
        for name in ("backbone_epochs", "prompt_epochs", "head_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"train.{name}: must be non-negative, got {getattr(self, name)}.")
        for name in ("backbone_lr", "head_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train.{name}: learning rate must be positive, got {getattr(self, name)}.")
        if self.prompt_lr < 0:
            raise ValueError(f"train.prompt_lr: learning rate must be non-negative, got {self.prompt_lr}.")
        if self.proximal_mu < 0:
            raise ValueError(f"train.proximal_mu: must be non-negative, got {self.proximal_mu}.")
        if self.num_workers < 1 or self.num_threads < 1:
            raise ValueError("train.num_workers and train.num_threads must be at least 1.")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"train.dtype: must be `float32` or `float64`, got {self.dtype}.")
        # local import: federated.py imports this module
        from .federated import resolve_algorithm

        for tag in [self.algorithm] + list(self.compare_algorithms):
            try:
                resolve_algorithm(tag)
            except ValueError as e:
                raise ValueError(f"train.algorithm: {e}") from None

    @property
    def algorithms(self) -> List[str]:
        tags = [self.algorithm]
        for tag in self.compare_algorithms:
            if tag not in tags:
                tags.append(tag)
        return tags


@dataclass
class OutputArguments:
    """
    Arguments pertaining to what the run writes to disk.
    """

    output_dir: str = field(default="./pfedpt_output", metadata={"help": "Directory for every output file."})
    overwrite_output_dir: bool = field(
        default=False, metadata={"help": "Allow writing into a non-empty output directory."}
    )
    emit_checkpoints: bool = field(default=True, metadata={"help": "Write the final backbone, prompts and heads."})
    emit_analysis: bool = field(
        default=True, metadata={"help": "Write drift, similarity and prompt distance CSVs."}
    )
    emit_embeddings: bool = field(
        default=False, metadata={"help": "Write last-layer embeddings of the pure-color probe images."}
    )
    emit_shard_manifest: bool = field(default=False, metadata={"help": "Write the (client_id, split, index) CSV."})
    record_wall_time: bool = field(
        default=False,
        metadata={
            "help": "Write real `wall_ms` values in the round CSVs. Off by default: `wall_ms` is then 0 and "
            "reruns are byte-identical."
        },
    )
    report_to: List[str] = list_field(
        default=[], metadata={"help": "Accelerate trackers metrics are forwarded to, e.g. `tensorboard`."}
    )


@dataclass
class AnalysisArguments:
    """
    Arguments pertaining to the diagnostic probes run after training.
    """

    probe_images: int = field(default=100, metadata={"help": "Number of pure-color probe images."})
    similarity_metric: str = field(default="cosine", metadata={"help": "`cosine` or `tv` (1 - total variation)."})
    new_client: bool = field(
        default=False, metadata={"help": "Reserve one extra shard as an unseen client and fine-tune on it."}
    )
    finetune_budget: int = field(default=400, metadata={"help": "Train samples available to the new client."})
    finetune_epochs: int = field(default=10, metadata={"help": "New-client adaptation epochs."})
    finetune_mode: Optional[str] = field(
        default=None,
        metadata={"help": "`prompt-only` or `head-only`. Defaults to prompt-only for prompted algorithms."},
    )

    def __post_init__(self):
        if self.probe_images < 1:
            raise ValueError(f"analysis.probe_images: must be at least 1, got {self.probe_images}.")
        if self.similarity_metric not in SIMILARITY_METRICS:
            raise ValueError(f"analysis.similarity_metric: should be one of {SIMILARITY_METRICS}.")
        if self.finetune_mode is not None and self.finetune_mode not in FINETUNE_MODES:
            raise ValueError(f"analysis.finetune_mode: should be one of {FINETUNE_MODES}.")
        if self.finetune_budget < 1 or self.finetune_epochs < 0:
            raise ValueError("analysis.finetune_budget must be positive and analysis.finetune_epochs non-negative.")


@dataclass
class SweepArguments:
    """
    Grid of the prompt template ablation.
    """

    templates: List[str] = list_field(
        default=list(PROMPT_TEMPLATES), metadata={"help": "Prompt templates of the grid."}
    )
    sizes: List[int] = list_field(default=[2, 4, 6, 8, 10, 12, 14, 16], metadata={"help": "Prompt sizes of the grid."})

    def __post_init__(self):
        if not self.templates or not self.sizes:
            raise ValueError("sweep.templates and sweep.sizes must not be empty.")
        for template in self.templates:
            if template not in PROMPT_TEMPLATES:
                raise ValueError(f"sweep.templates: unknown template '{template}'.")
        if any(size < 0 for size in self.sizes):
            raise ValueError(f"sweep.sizes: sizes must be non-negative, got {self.sizes}.")


@dataclass
class RunArguments:
    """
    Command line flags of `run_pfedpt_experiment.py`.
    """

    config_path: str = field(metadata={"help": "Path to the JSON experiment config."})
    output_dir: Optional[str] = field(default=None, metadata={"help": "Overrides `output.output_dir`."})
    overwrite_output_dir: bool = field(default=False, metadata={"help": "Overrides `output.overwrite_output_dir`."})
    num_workers: Optional[int] = field(default=None, metadata={"help": "Overrides `train.num_workers`."})
    record_wall_time: bool = field(
        default=False,
        metadata={
            "help": "Overrides `output.record_wall_time`. Without it the `wall_ms` column of the round CSVs "
            "is written as 0 so that reruns are byte-identical."
        },
    )
    log_level: str = field(default="info", metadata={"help": "`debug`, `info`, `warning` or `error`."})
    mode: str = field(default="run", metadata={"help": "`run` or `sweep`."})

    def __post_init__(self):
        if self.mode not in ("run", "sweep"):
            raise ValueError(f"--mode must be `run` or `sweep`, got {self.mode}.")
        if self.log_level not in ("debug", "info", "warning", "error"):
            raise ValueError(f"--log_level must be one of debug, info, warning, error; got {self.log_level}.")


BLOCKS = {
    "dataset": DatasetArguments,
    "partition": PartitionArguments,
    "model": ModelArguments,
    "prompt": PromptArguments,
    "train": TrainConfig,
    "output": OutputArguments,
    "analysis": AnalysisArguments,
    "sweep": SweepArguments,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetArguments
    partition: PartitionArguments
    model: ModelArguments
    prompt: PromptArguments
    train: TrainConfig
    output: OutputArguments
    analysis: AnalysisArguments
    sweep: SweepArguments

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in BLOCKS}

    @property
    def config_hash(self) -> str:
        document = self.to_dict()
        # where results land does not change them
        document["output"] = {k: v for k, v in document["output"].items() if k not in ("output_dir", "overwrite_output_dir")}
        document["train"].pop("num_workers")
        return config_hash(document)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.dataset.image_shape

    def model_config(self) -> FedCNNConfig:
        channels, height, width = self.image_shape
        return FedCNNConfig(
            architecture=self.model.architecture,
            num_channels=channels,
            image_size=[height, width],
            num_classes=self.model.num_classes,
            conv_channels=self.model.conv_channels,
            kernel_size=self.model.kernel_size,
            hidden_sizes=self.model.hidden_sizes,
            init_seed=self.model.init_seed,
        )

    def prompt_spec(self, template: Optional[str] = None, size: Optional[int] = None) -> PromptSpec:
        return PromptSpec(
            template=self.prompt.template if template is None else template,
            size=self.prompt.size if size is None else size,
            image_shape=self.image_shape,
            mode=self.prompt.mode,
        )

    def partition_config(self) -> PartitionConfig:
        # the new client of the analysis is one extra, never sampled shard
        extra = 1 if self.analysis.new_client else 0
        return self.partition.to_partition_config(num_clients=self.train.num_clients + extra)


def _parse_block(name: str, values: Any):
    cls = BLOCKS[name]
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ValueError(f"{name}: expected an object, got {type(values).__name__}.")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"{name}.{unknown[0]}: unknown key.")
    (block,) = HfArgumentParser(cls).parse_dict(values)
    return block


def parse_config(file: str) -> ExperimentConfig:
    """
    Read a JSON experiment config, apply the defaults of every omitted key, derive the seeds that were not given
    from `train.seed` and validate the blocks against each other. Errors name the offending key path.
    """
    if not os.path.isfile(file):
        raise FileNotFoundError(f"Config file {file} does not exist.")
    with open(file) as f:
        document = json.load(f)
    if not isinstance(document, dict):
        raise ValueError(f"{file}: the config must be a JSON object.")
    unknown = sorted(set(document) - set(BLOCKS))
    if unknown:
        raise ValueError(f"{unknown[0]}: unknown key.")
    return build_config({name: document.get(name) for name in BLOCKS})


def build_config(document: Dict[str, Any]) -> ExperimentConfig:
    config = ExperimentConfig(**{name: _parse_block(name, document.get(name)) for name in BLOCKS})
    seed = config.train.seed

    if config.dataset.seed is None:
        config.dataset.seed = derive_seed(seed, "synthetic") % (2**31)
    if config.partition.seed is None:
        config.partition.seed = derive_seed(seed, "partition") % (2**31)
    if config.model.init_seed is None:
        config.model.init_seed = derive_seed(seed, "init") % (2**31)

    if config.train.num_clients is None:
        config.train.num_clients = config.partition.num_clients
    elif config.train.num_clients != config.partition.num_clients:
        raise ValueError(
            f"train.num_clients: {config.train.num_clients} does not match partition.num_clients "
            f"{config.partition.num_clients}."
        )

    num_classes = config.dataset.num_classes
    if config.model.num_classes is None:
        config.model.num_classes = num_classes
    elif config.model.num_classes != num_classes:
        raise ValueError(f"model.num_classes: {config.model.num_classes} does not match the {num_classes} dataset classes.")
    if config.partition.classes_per_client > num_classes:
        raise ValueError(
            f"partition.classes_per_client: {config.partition.classes_per_client} exceeds the {num_classes} classes."
        )

    if config.dataset.source != "synthetic" and not config.dataset.path:
        raise ValueError("dataset.path: required for CIFAR sources (or set PFEDPT_DATA_ROOT).")

    try:
        model_config = config.model_config()
    except ValueError as e:
        raise ValueError(f"model: {e}") from None
    if model_config.architecture == "cnn-paper" and min(model_config.feature_map_size()) < 1:
        raise ValueError(f"model.architecture: input {config.image_shape} is too small for two conv + pool stages.")
    try:
        config.prompt_spec()
    except ValueError as e:
        raise ValueError(f"prompt.size: {e}") from None
    return config
