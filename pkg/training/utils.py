import csv
import hashlib
import json
import os
import zlib
from dataclasses import field
from typing import Dict, Iterable, Optional, Sequence

import numpy as np
import torch


ROUND_CSV_HEADER = ["round", "client_id", "train_loss", "test_acc", "weighted_acc", "prompt_drift", "wall_ms"]
_SEED_MASK = (1 << 63) - 1


def list_field(default=None, metadata=None):
    return field(default_factory=lambda: default, metadata=metadata)


def derive_seed(global_seed: int, domain: str, *ids: int) -> int:
    """
    Domain-separated child seed of `global_seed`. Partition, initialization, sampling and every per-client stream
    get their own domain, so that adding a consumer never shifts the numbers another one sees.
    """
    entropy = [int(global_seed), zlib.crc32(domain.encode("utf-8"))] + [int(i) for i in ids]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0]) & _SEED_MASK


def torch_generator(global_seed: int, domain: str, *ids: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(global_seed, domain, *ids))


def numpy_generator(global_seed: int, domain: str, *ids: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(global_seed, domain, *ids))


def format_float(value: Optional[float]) -> str:
    if value is None:
        return ""
    return f"{value:.10g}"


def check_output_dir(output_dir: str, overwrite_output_dir: bool = False):
    if os.path.isdir(output_dir) and os.listdir(output_dir) and not overwrite_output_dir:
        raise ValueError(
            f"Output directory ({output_dir}) already exists and is not empty. "
            "Use --overwrite_output_dir to overcome."
        )
    os.makedirs(output_dir, exist_ok=True)


class RoundReportWriter:
    """Appends one row per (round, client) to a round CSV, flushing after every round."""

    def __init__(self, path: str, record_wall_time: bool = False):
        self.path = path
        self.record_wall_time = record_wall_time
        self._file = open(path, "w", newline="")
        self._writer = csv.writer(self._file)
        self._writer.writerow(ROUND_CSV_HEADER)
        self._file.flush()

    def write(self, report):
        wall_ms = int(round(report.wall_time * 1000)) if self.record_wall_time else 0
        for client_id in sorted(report.test_acc):
            self._writer.writerow(
                [
                    report.round,
                    client_id,
                    format_float(report.train_loss.get(client_id)),
                    format_float(report.test_acc[client_id]),
                    format_float(report.weighted_acc),
                    format_float(report.prompt_drift.get(client_id, 0.0)),
                    wall_ms,
                ]
            )
        self._file.flush()

    def close(self):
        if not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])


def write_json(path: str, document: Dict):
    with open(path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")


def config_hash(document: Dict) -> str:
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def package_versions() -> Dict[str, str]:
    import accelerate
    import transformers

    import pfedpt

    return {
        "pfedpt": pfedpt.__version__,
        "torch": torch.__version__,
        "transformers": transformers.__version__,
        "accelerate": accelerate.__version__,
        "numpy": np.__version__,
    }


def log_metric(
    accelerator,
    metrics: Dict,
    step: int,
    train_time: Optional[float] = None,
    prefix: str = "train",
):
    """Helper function to log all training/evaluation metrics with the correct prefixes and styling."""
    if accelerator is None:
        return
    log_metrics = {}
    for k, v in metrics.items():
        log_metrics[f"{prefix}/{k}"] = v
    if train_time is not None:
        log_metrics[f"{prefix}/time"] = train_time
    accelerator.log(log_metrics, step=step)
