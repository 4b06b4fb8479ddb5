import csv
import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch


logger = logging.getLogger(__name__)

CIFAR_IMAGE_SHAPE = (3, 32, 32)
CIFAR_RECORD_PIXELS = 3 * 32 * 32
CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]
CIFAR100_TRAIN_FILES = ["train.bin"]
CIFAR100_TEST_FILES = ["test.bin"]

PARTITION_SCHEMES = ("iid", "dirichlet", "pathological")


@dataclass
class ImageDataset:
    """
    Images of shape `(N, C, H, W)`, either raw `uint8` bytes or normalized `float32` values, with their labels.
    """

    images: torch.Tensor
    labels: torch.LongTensor
    num_classes: int
    split: str = "train"
    normalized: bool = False

    def __post_init__(self):
        if self.images.shape[0] == 0:
            raise ValueError(f"The {self.split} split is empty.")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"Got {self.images.shape[0]} images but {self.labels.shape[0]} labels.")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"Labels of the {self.split} split must lie in [0, {self.num_classes}).")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class ClientShard:
    """Train/test index views of one client, with the label histogram of its train indices."""

    client_id: int
    train_indices: np.ndarray
    test_indices: np.ndarray
    label_histogram: np.ndarray

    @property
    def num_train(self) -> int:
        return int(self.train_indices.size)

    @property
    def label_distribution(self) -> np.ndarray:
        return self.label_histogram / max(1, self.label_histogram.sum())


@dataclass
class PartitionConfig:
    scheme: str = "dirichlet"
    num_clients: int = 50
    alpha: float = 0.3
    classes_per_client: int = 5
    seed: int = 0
    min_samples: int = 10
    max_retries: int = 100

    def validate(self, num_classes: int):
        if self.scheme not in PARTITION_SCHEMES:
            raise ValueError(f"Unknown partition scheme '{self.scheme}', should be one of {PARTITION_SCHEMES}.")
        if self.num_clients < 1:
            raise ValueError(f"`num_clients` must be at least 1, got {self.num_clients}.")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}.")
        if not 1 <= self.classes_per_client <= num_classes:
            raise ValueError(f"`classes_per_client` must lie in [1, {num_classes}], got {self.classes_per_client}.")


def _read_cifar_records(file: str, num_records: int, label_bytes: int, label_index: int, num_classes: int):
    if not os.path.isfile(file):
        raise FileNotFoundError(f"Missing CIFAR file {file}.")
    record_size = label_bytes + CIFAR_RECORD_PIXELS
    size = os.path.getsize(file)
    if size != num_records * record_size:
        raise ValueError(f"{file} has {size} bytes, expected {num_records * record_size}.")
    records = np.fromfile(file, dtype=np.uint8).reshape(num_records, record_size)
    labels = records[:, label_index].astype(np.int64)
    if labels.max() >= num_classes:
        raise ValueError(f"{file} holds label byte {labels.max()} but only {num_classes} classes exist.")
    # 1024 R, 1024 G, 1024 B, each row-major
    images = records[:, label_bytes:].reshape(num_records, *CIFAR_IMAGE_SHAPE)
    return images, labels


def _load_cifar_split(path, files, records_per_file, label_bytes, label_index, num_classes, split):
    images, labels = [], []
    for name in files:
        file_images, file_labels = _read_cifar_records(
            os.path.join(path, name), records_per_file, label_bytes, label_index, num_classes
        )
        images.append(file_images)
        labels.append(file_labels)
    return ImageDataset(
        images=torch.from_numpy(np.concatenate(images)),
        labels=torch.from_numpy(np.concatenate(labels)),
        num_classes=num_classes,
        split=split,
    )


def load_cifar10(path: str) -> Tuple[ImageDataset, ImageDataset]:
    """Read the CIFAR-10 binary batches: each record is one label byte followed by 3072 pixel bytes."""
    if not os.path.isdir(path):
        raise FileNotFoundError(f"CIFAR-10 directory {path} does not exist.")
    train = _load_cifar_split(path, CIFAR10_TRAIN_FILES, 10000, 1, 0, 10, "train")
    test = _load_cifar_split(path, CIFAR10_TEST_FILES, 10000, 1, 0, 10, "test")
    logger.info(f"Loaded CIFAR-10 from {path}: {len(train)} train / {len(test)} test images.")
    return train, test


def load_cifar100(path: str) -> Tuple[ImageDataset, ImageDataset]:
    """Read the CIFAR-100 binary files: coarse and fine label bytes, then 3072 pixel bytes. Fine labels are kept."""
    if not os.path.isdir(path):
        raise FileNotFoundError(f"CIFAR-100 directory {path} does not exist.")
    train = _load_cifar_split(path, CIFAR100_TRAIN_FILES, 50000, 2, 1, 100, "train")
    test = _load_cifar_split(path, CIFAR100_TEST_FILES, 10000, 2, 1, 100, "test")
    logger.info(f"Loaded CIFAR-100 from {path}: {len(train)} train / {len(test)} test images.")
    return train, test


def normalize(ds: ImageDataset, mean: Sequence[float] = (0.5, 0.5, 0.5), std: Sequence[float] = (0.5, 0.5, 0.5)):
    """Per channel `(pixel / 255 - mean) / std`, which maps raw bytes to [-1, 1] with the default statistics."""
    if ds.normalized or ds.images.dtype != torch.uint8:
        raise ValueError(f"The {ds.split} split is already normalized.")
    channels = ds.images.shape[1]
    if len(mean) != channels or len(std) != channels:
        raise ValueError(f"Expected {channels} channel statistics, got mean={mean} and std={std}.")
    mean = torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
    std = torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1)
    images = (ds.images.to(torch.float32) / 255.0 - mean) / std
    return ImageDataset(images, ds.labels, ds.num_classes, ds.split, normalized=True)


def make_synthetic(
    num_classes: int,
    shape: Sequence[int],
    n_per_class: int,
    noise_sigma: float,
    seed: int,
    n_test_per_class: Optional[int] = None,
) -> Tuple[ImageDataset, ImageDataset]:
    """
    Class `k` samples are a fixed seeded template `T_k` (uniform in [-1, 1]) plus Gaussian noise of std
    `noise_sigma`. Templates, train noise and test noise come from disjoint sub-seeds. The result is already in
    normalized pixel space.
    """
    if num_classes < 2:
        raise ValueError(f"A synthetic dataset needs at least 2 classes, got {num_classes}.")
    if n_per_class < 1:
        raise ValueError(f"`n_per_class` must be positive, got {n_per_class}.")
    shape = tuple(int(s) for s in shape)
    n_test_per_class = n_per_class if n_test_per_class is None else n_test_per_class

    templates = synthetic_templates(num_classes, shape, seed).numpy()

    def draw(sub_seed, per_class, split):
        rng = np.random.default_rng(np.random.SeedSequence([seed, sub_seed]))
        labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
        noise = rng.standard_normal(size=(labels.size, *shape)).astype(np.float32)
        images = templates[labels] + np.float32(noise_sigma) * noise if noise_sigma > 0 else templates[labels].copy()
        return ImageDataset(torch.from_numpy(images), torch.from_numpy(labels), num_classes, split, normalized=True)

    return draw(1, n_per_class, "train"), draw(2, n_test_per_class, "test")


def synthetic_templates(num_classes: int, shape: Sequence[int], seed: int) -> torch.Tensor:
    """The class templates used by `make_synthetic` for the same arguments."""
    template_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    return torch.from_numpy(template_rng.uniform(-1.0, 1.0, size=(num_classes, *shape)).astype(np.float32))


def _split_iid(labels, cfg, rng):
    return np.array_split(rng.permutation(labels.size), cfg.num_clients)


def _split_dirichlet(labels, cfg, rng, num_classes):
    parts = [[] for _ in range(cfg.num_clients)]
    for c in range(num_classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        proportions = rng.dirichlet(np.full(cfg.num_clients, cfg.alpha))
        cuts = (np.cumsum(proportions) * idx.size).astype(np.int64)[:-1]
        for client, chunk in enumerate(np.split(idx, cuts)):
            parts[client].append(chunk)
    return [np.concatenate(p) for p in parts]


def _pathological_class_sets(cfg, rng, num_classes):
    """Random `classes_per_client` distinct classes per client, every class held by at least one client."""
    held = [[] for _ in range(cfg.num_clients)]
    # deal one shuffled copy of the classes round-robin, so that coverage holds
    for slot, c in enumerate(rng.permutation(num_classes)):
        held[slot % cfg.num_clients].append(int(c))
    for client in rng.permutation(cfg.num_clients):
        missing = cfg.classes_per_client - len(held[client])
        if missing > 0:
            free = np.setdiff1d(np.arange(num_classes), held[client])
            held[client].extend(int(c) for c in rng.choice(free, size=missing, replace=False))
    return held


def _split_pathological(labels, cfg, rng, num_classes):
    held = _pathological_class_sets(cfg, rng, num_classes)
    parts = [[] for _ in range(cfg.num_clients)]
    for c in range(num_classes):
        holders = [client for client in range(cfg.num_clients) if c in held[client]]
        idx = rng.permutation(np.flatnonzero(labels == c))
        for client, chunk in zip(holders, np.array_split(idx, len(holders))):
            parts[client].append(chunk)
    return [np.concatenate(p) if p else np.zeros(0, dtype=np.int64) for p in parts]


def _matched_test_split(train_parts, train_labels, test_labels, rng, num_classes):
    """Split each class of the test set among clients with that client's share of the class in train."""
    num_clients = len(train_parts)
    parts = [[] for _ in range(num_clients)]
    counts = np.stack([np.bincount(train_labels[p], minlength=num_classes) for p in train_parts])
    for c in range(num_classes):
        total = counts[:, c].sum()
        if total == 0:
            continue
        idx = rng.permutation(np.flatnonzero(test_labels == c))
        cuts = np.floor(np.cumsum(counts[:, c] / total) * idx.size).astype(np.int64)[:-1]
        for client, chunk in enumerate(np.split(idx, cuts)):
            parts[client].append(chunk)
    return [np.concatenate(p) if p else np.zeros(0, dtype=np.int64) for p in parts], counts


def partition(ds_train: ImageDataset, ds_test: ImageDataset, cfg: PartitionConfig) -> List[ClientShard]:
    """
    Split `ds_train` among `cfg.num_clients` clients (iid, Dirichlet label skew or pathological class shards) and
    give every client a test shard drawn from `ds_test` with the same per-class proportions. Draws leaving a client
    below `cfg.min_samples` train samples (or without test samples) are resampled up to `cfg.max_retries` times.
    """
    num_classes = ds_train.num_classes
    cfg.validate(num_classes)
    if cfg.num_clients * cfg.min_samples > len(ds_train):
        raise ValueError(
            f"Infeasible partition: {cfg.num_clients} clients x {cfg.min_samples} samples exceeds {len(ds_train)}."
        )
    if cfg.scheme == "pathological" and cfg.classes_per_client * cfg.num_clients < num_classes:
        raise ValueError(
            f"Infeasible partition: {cfg.num_clients} clients x {cfg.classes_per_client} classes cannot cover "
            f"{num_classes} classes."
        )

    train_labels = ds_train.labels.numpy()
    test_labels = ds_test.labels.numpy()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5041]))

    for attempt in range(cfg.max_retries):
        if cfg.scheme == "iid":
            train_parts = _split_iid(train_labels, cfg, rng)
        elif cfg.scheme == "dirichlet":
            train_parts = _split_dirichlet(train_labels, cfg, rng, num_classes)
        else:
            train_parts = _split_pathological(train_labels, cfg, rng, num_classes)
        test_parts, counts = _matched_test_split(train_parts, train_labels, test_labels, rng, num_classes)

        if all(p.size >= cfg.min_samples for p in train_parts) and all(p.size > 0 for p in test_parts):
            shards = [
                ClientShard(
                    client_id=client,
                    train_indices=np.sort(train_parts[client]).astype(np.int64),
                    test_indices=np.sort(test_parts[client]).astype(np.int64),
                    label_histogram=counts[client].astype(np.int64),
                )
                for client in range(cfg.num_clients)
            ]
            logger.info(
                f"Partitioned {len(ds_train)} samples among {cfg.num_clients} clients ({cfg.scheme}, "
                f"attempt {attempt + 1}); smallest shard has {min(s.num_train for s in shards)} samples."
            )
            return shards
        logger.debug(f"Partition attempt {attempt + 1} left a client below {cfg.min_samples} samples, resampling.")

    raise RuntimeError(
        f"Could not partition with every client holding at least {cfg.min_samples} samples after "
        f"{cfg.max_retries} attempts."
    )


def export_shard_manifest(shards: List[ClientShard], path: str):
    """Write the `(client_id, split, index)` CSV manifest of a partition."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["client_id", "split", "index"])
        for shard in shards:
            for split, indices in (("train", shard.train_indices), ("test", shard.test_indices)):
                for index in indices:
                    writer.writerow([shard.client_id, split, int(index)])


def shard_tensors(ds: ImageDataset, indices: np.ndarray) -> Tuple[torch.Tensor, torch.LongTensor]:
    index = torch.from_numpy(np.asarray(indices, dtype=np.int64))
    return ds.images[index], ds.labels[index]

