#!/usr/bin/env python
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

""" Simulate personalized federated learning with client visual prompts."""

import copy
import logging
import os
import sys
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import transformers
from accelerate import Accelerator
from accelerate.utils import set_seed
from tqdm import tqdm
from transformers import HfArgumentParser

from pfedpt import prompt_param_count
from training.arguments import ExperimentConfig, RunArguments, parse_config
from training.data import (
    ImageDataset,
    export_shard_manifest,
    load_cifar10,
    load_cifar100,
    make_synthetic,
    normalize,
    partition,
)
from training.eval import (
    distribution_similarity,
    drift_series,
    export_embeddings,
    finetune_new_client,
    prompt_distance_matrix,
    pure_color_images,
    pure_color_probe,
)
from training.federated import FederatedData, FederatedSimulation, resolve_algorithm
from training.utils import (
    check_output_dir,
    file_sha256,
    package_versions,
    torch_generator,
    write_csv,
    write_json,
)


logger = logging.getLogger(__name__)

LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warning": logging.WARNING, "error": logging.ERROR}


def load_datasets(cfg: ExperimentConfig) -> Tuple[ImageDataset, ImageDataset]:
    dataset = cfg.dataset
    if dataset.source == "synthetic":
        return make_synthetic(
            dataset.classes,
            dataset.shape,
            dataset.n_per_class,
            dataset.noise_sigma,
            dataset.seed,
            n_test_per_class=dataset.n_test_per_class,
        )
    loader = load_cifar10 if dataset.source == "cifar10" else load_cifar100
    train, test = loader(dataset.path)
    if dataset.normalize:
        return normalize(train), normalize(test)
    return tuple(
        ImageDataset(ds.images.to(torch.float32), ds.labels, ds.num_classes, ds.split) for ds in (train, test)
    )


def build_federated_data(cfg: ExperimentConfig) -> Tuple[FederatedData, List[int]]:
    """Datasets, shards, and the ids of the clients held out of training."""
    train, test = load_datasets(cfg)
    shards = partition(train, test, cfg.partition_config())
    holdout = [cfg.train.num_clients] if cfg.analysis.new_client else []
    return FederatedData(train=train, test=test, shards=shards), holdout


def best_round(reports) -> Tuple[float, int]:
    if not reports:
        return 0.0, 0
    best = max(reports, key=lambda r: (r.weighted_acc, -r.round))
    return best.weighted_acc, best.round


def run_algorithm(
    cfg: ExperimentConfig,
    data: FederatedData,
    holdout: List[int],
    tag: str,
    output_dir: Optional[str],
    accelerator=None,
    prompt_spec=None,
) -> FederatedSimulation:
    simulation = FederatedSimulation(
        cfg.train,
        data,
        cfg.model_config(),
        prompt_spec if prompt_spec is not None else cfg.prompt_spec(),
        algorithm=tag,
        holdout=holdout,
        accelerator=accelerator,
    )
    report_path = os.path.join(output_dir, f"rounds_{tag}.csv") if output_dir is not None else None
    simulation.run(report_path=report_path, record_wall_time=cfg.output.record_wall_time)
    return simulation


def probe_similarity(cfg: ExperimentConfig, simulation: FederatedSimulation) -> List[Tuple[int, str, float]]:
    model = copy.deepcopy(simulation.template)
    rows = []
    for state in simulation.clients:
        hist = pure_color_probe(
            model,
            state.prompt,
            cfg.analysis.probe_images,
            cfg.image_shape,
            torch_generator(cfg.train.seed, "probe", state.client_id),
            params=simulation.client_params(state),
        )
        score = distribution_similarity(hist, state.shard.label_distribution, cfg.analysis.similarity_metric)
        rows.append((state.client_id, simulation.tag, score))
    return rows


def embedding_rows(cfg: ExperimentConfig, simulation: FederatedSimulation) -> List[List]:
    model = copy.deepcopy(simulation.template)
    images = pure_color_images(
        cfg.analysis.probe_images,
        cfg.image_shape,
        torch_generator(cfg.train.seed, "embedding-images"),
        dtype=simulation.dtype,
    )
    rows = []
    for state in simulation.clients:
        embeddings = export_embeddings(
            model,
            state.prompt,
            images,
            rng=torch_generator(cfg.train.seed, "embedding-anchor", state.client_id),
            params=simulation.client_params(state),
        )
        for image_id, embedding in enumerate(embeddings.tolist()):
            rows.append([state.client_id, image_id] + [float(v) for v in embedding])
    return rows


def finetune_rows(cfg: ExperimentConfig, simulation: FederatedSimulation) -> List[Tuple[str, int, str, float]]:
    """Adaptation curve of the held-out client on the final backbone of `simulation`, one row per epoch."""
    if not simulation.holdout:
        return []
    if not simulation.algorithm.aggregates:
        logger.info(f"[{simulation.tag}] has no aggregated backbone; skipping new-client adaptation.")
        return []
    new_client = simulation.holdout[0]
    mode = cfg.analysis.finetune_mode or ("prompt-only" if simulation.algorithm.uses_prompt else "head-only")
    budget = cfg.analysis.finetune_budget
    if budget > new_client.num_samples:
        logger.warning(f"New client holds {new_client.num_samples} samples, below the budget of {budget}.")
        budget = new_client.num_samples
    curve = finetune_new_client(
        simulation.template,
        simulation.global_params,
        new_client.train_x,
        new_client.train_y,
        new_client.test_x,
        new_client.test_y,
        prompt_spec=cfg.prompt_spec(),
        budget_samples=budget,
        epochs=cfg.analysis.finetune_epochs,
        mode=mode,
        lr=cfg.train.prompt_lr if mode == "prompt-only" else cfg.train.head_lr,
        batch_size=cfg.train.batch_size,
        seed=cfg.train.seed,
    )
    return [(simulation.tag, epoch, mode, accuracy) for epoch, accuracy in enumerate(curve)]


def save_checkpoints(cfg: ExperimentConfig, simulation: FederatedSimulation, output_dir: str):
    directory = os.path.join(output_dir, "checkpoints", simulation.tag)
    os.makedirs(directory, exist_ok=True)
    spec_tag = cfg.model_config().spec_tag
    if simulation.algorithm.aggregates:
        simulation.global_params.save(os.path.join(directory, "backbone.pfpv"), spec_tag)
    for state in simulation.clients:
        if state.model is not None:
            state.model.save(os.path.join(directory, f"client_{state.client_id}_model.pfpv"), spec_tag)
        if state.head is not None:
            state.head.save(os.path.join(directory, f"client_{state.client_id}_head.pfpv"), f"{spec_tag}:head")
        if state.prompt is not None:
            state.prompt.save(os.path.join(directory, f"client_{state.client_id}_prompt.pfpt"))


def write_manifest(cfg: ExperimentConfig, output_dir: str, algorithms: List[str]):
    artifacts = {}
    for root, _, files in os.walk(output_dir):
        for name in files:
            path = os.path.join(root, name)
            relative = os.path.relpath(path, output_dir)
            if relative != "manifest.json":
                artifacts[relative.replace(os.sep, "/")] = file_sha256(path)
    write_json(
        os.path.join(output_dir, "manifest.json"),
        {
            "config_hash": cfg.config_hash,
            "config": cfg.to_dict(),
            "seeds": {
                "train": cfg.train.seed,
                "dataset": cfg.dataset.seed,
                "partition": cfg.partition.seed,
                "init": cfg.model.init_seed,
            },
            "algorithms": algorithms,
            "versions": package_versions(),
            "artifacts": dict(sorted(artifacts.items())),
        },
    )


def run(cfg: ExperimentConfig, accelerator=None) -> int:
    """
    Full pipeline: data, partition, one simulation per algorithm (the primary one first, then the comparisons on
    the same partition and initial backbone), analysis, summary, checkpoints and manifest.
    """
    output_dir = cfg.output.output_dir
    check_output_dir(output_dir, cfg.output.overwrite_output_dir)
    set_seed(cfg.train.seed)

    data, holdout = build_federated_data(cfg)
    if cfg.output.emit_shard_manifest:
        export_shard_manifest(data.shards, os.path.join(output_dir, "shards.csv"))

    algorithms = cfg.train.algorithms
    summary: Dict = {
        "primary": algorithms[0],
        "similarity_metric": cfg.analysis.similarity_metric,
        "drift_norm": "mean_abs_over_mask",
        "algorithms": {},
        "paired": {},
    }
    similarity: List[Tuple[int, str, float]] = []
    finetune: List[Tuple[str, int, str, float]] = []
    for tag in algorithms:
        logger.info(f"***** Running {tag} for {cfg.train.rounds} rounds on {cfg.train.num_clients} clients *****")
        simulation = run_algorithm(cfg, data, holdout, tag, output_dir, accelerator=accelerator)
        best_acc, best_at = best_round(simulation.reports)
        entry = {
            "rounds": len(simulation.reports),
            "final_weighted_acc": simulation.reports[-1].weighted_acc if simulation.reports else None,
            "best_weighted_acc": best_acc,
            "best_round": best_at,
        }

        if cfg.output.emit_analysis:
            write_csv(
                os.path.join(output_dir, f"drift_{tag}.csv"), ["round", "mean_drift"], drift_series(simulation.reports)
            )
            rows = probe_similarity(cfg, simulation)
            similarity.extend(rows)
            entry["mean_similarity"] = float(np.mean([score for _, _, score in rows]))
            if simulation.algorithm.uses_prompt and tag == algorithms[0]:
                write_csv(
                    os.path.join(output_dir, "prompt_distance.csv"),
                    ["client_a", "client_b", "prompt_distance", "label_distance"],
                    prompt_distance_matrix(
                        {s.client_id: s.prompt for s in simulation.clients},
                        {s.client_id: s.shard.label_histogram for s in simulation.clients},
                    ),
                )
        if cfg.output.emit_embeddings and tag == algorithms[0]:
            embedding_size = simulation.template.embedding_size
            write_csv(
                os.path.join(output_dir, "embeddings.csv"),
                ["client_id", "image_id"] + [f"dim_{i}" for i in range(embedding_size)],
                embedding_rows(cfg, simulation),
            )
        if holdout:
            curve = finetune_rows(cfg, simulation)
            if curve:
                entry["finetune_gain"] = curve[-1][3] - curve[0][3]
            finetune.extend(curve)
        if cfg.output.emit_checkpoints:
            save_checkpoints(cfg, simulation, output_dir)
        summary["algorithms"][tag] = entry
        logger.info(f"[{tag}] best weighted accuracy {best_acc:.4f} at round {best_at}")

    if cfg.output.emit_analysis:
        write_csv(os.path.join(output_dir, "similarity.csv"), ["client_id", "algorithm", "score"], similarity)
    if holdout:
        write_csv(os.path.join(output_dir, "finetune.csv"), ["algorithm", "epoch", "mode", "accuracy"], finetune)
    primary = summary["algorithms"][algorithms[0]]
    for tag in algorithms[1:]:
        summary["paired"][tag] = {
            "delta_best_weighted_acc": primary["best_weighted_acc"] - summary["algorithms"][tag]["best_weighted_acc"]
        }
    write_json(os.path.join(output_dir, "summary.json"), summary)
    write_manifest(cfg, output_dir, algorithms)
    return 0


def sweep(cfg: ExperimentConfig, accelerator=None) -> List[Dict]:
    """
    One run of the primary algorithm per (template, size) point of the sweep grid. Points that fail are logged
    and recorded, and the sweep moves on.
    """
    output_dir = cfg.output.output_dir
    check_output_dir(output_dir, cfg.output.overwrite_output_dir)
    set_seed(cfg.train.seed)
    tag = cfg.train.algorithm if resolve_algorithm(cfg.train.algorithm).uses_prompt else "pfedpt"
    data, holdout = build_federated_data(cfg)

    rows = []
    grid = [(template, size) for template in cfg.sweep.templates for size in cfg.sweep.sizes]
    for template, size in tqdm(grid, desc="sweep"):
        row = {"template": template, "size": size, "num_prompt_params": "", "best_weighted_acc": "", "best_round": ""}
        try:
            prompt_spec = cfg.prompt_spec(template=template, size=size)
            row["num_prompt_params"] = prompt_param_count(prompt_spec)
            simulation = run_algorithm(cfg, data, holdout, tag, None, accelerator=accelerator, prompt_spec=prompt_spec)
            row["best_weighted_acc"], row["best_round"] = best_round(simulation.reports)
            row["status"] = "ok"
        except Exception as e:
            logger.error(f"Sweep point {template} p={size} failed: {e}")
            row["status"] = f"failed: {e}"
        rows.append(row)

    header = ["template", "size", "num_prompt_params", "best_weighted_acc", "best_round", "status"]
    write_csv(os.path.join(output_dir, "sweep.csv"), header, [[row[k] for k in header] for row in rows])
    finished = [row for row in rows if row["status"] == "ok"]
    if finished:
        best = max(finished, key=lambda row: row["best_weighted_acc"])
        logger.info(f"Best sweep point: {best['template']} p={best['size']} ({best['best_weighted_acc']:.4f})")
    write_manifest(cfg, output_dir, [tag])
    return rows


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = HfArgumentParser(RunArguments)
    if len(argv) == 1 and argv[0].endswith(".json"):
        # a single json argument is the experiment config itself
        run_args = RunArguments(config_path=os.path.abspath(argv[0]))
    else:
        (run_args,) = parser.parse_args_into_dataclasses(args=argv)

    # Setup logging
    logging.basicConfig(
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
        datefmt="%m/%d/%Y %H:%M:%S",
        handlers=[logging.StreamHandler(sys.stdout)],
    )
    level = LOG_LEVELS[run_args.log_level]
    logging.getLogger("training").setLevel(level)
    logger.setLevel(level)
    transformers.utils.logging.set_verbosity(level)

    accelerator = None
    try:
        cfg = parse_config(run_args.config_path)
        if run_args.output_dir is not None:
            cfg.output.output_dir = run_args.output_dir
        if run_args.overwrite_output_dir:
            cfg.output.overwrite_output_dir = True
        if run_args.num_workers is not None:
            cfg.train.num_workers = run_args.num_workers
        if run_args.record_wall_time:
            cfg.output.record_wall_time = True
        logger.info(f"Experiment config {cfg.config_hash[:12]}: {cfg.to_dict()}")

        if cfg.output.report_to:
            accelerator = Accelerator(log_with=cfg.output.report_to, project_dir=cfg.output.output_dir)
            accelerator.init_trackers(
                project_name="pfedpt",
                config={f"{block}.{k}": v for block, values in cfg.to_dict().items() for k, v in values.items()
                        if isinstance(v, (int, float, str, bool))},
            )

        if run_args.mode == "sweep":
            sweep(cfg, accelerator=accelerator)
            status = 0
        else:
            status = run(cfg, accelerator=accelerator)
    except Exception:
        logger.exception("Experiment failed")
        status = 1
    finally:
        if accelerator is not None:
            accelerator.end_training()
    return status


if __name__ == "__main__":
    sys.exit(main())
