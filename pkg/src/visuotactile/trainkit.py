"""Training loop, held-out error, k-fold cross-validation and the variant matrix."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numkit as nk
from .dataset import VolumeDataset, crop_batch, crop_size, example_folds, fit_stats
from .errors import NumericError, SplitError
from .model import TASKS, VARIANTS, FusionModel, LossWeights, init_params, overall_loss, predict_volumes, uses_tactile, uses_vision
from .numkit import LrSchedule

log = logging.getLogger(__name__)

ERROR_METRIC = "mean absolute error (ml)"


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    schedule: LrSchedule = field(default_factory=LrSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    variant: str = "fused"
    task: str = "multitask"
    seed: int = 0
    min_volume_ml: float = 10.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"]["milestones"] = list(self.schedule.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "schedule" in d:
            d["schedule"] = LrSchedule(**{**d["schedule"], "milestones": tuple(d["schedule"]["milestones"])})
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass
class TrainResult:
    model: FusionModel
    loss_curve: list[float]


def train(config: TrainConfig, data: VolumeDataset, stats=None) -> TrainResult:
    """Fit a fresh model on ``data`` with seeded shuffling and crops.

    Examples below ``config.min_volume_ml`` are left out. ``stats`` defaults to
    statistics of the training rows themselves.
    """
    keep = np.flatnonzero(data.volumes >= config.min_volume_ml)
    if len(keep) == 0:
        raise ValueError("no training examples at or above min_volume_ml")
    data = data.subset(keep)
    stats = stats or fit_stats(data)
    crop = crop_size(data.image_size)
    model = init_params(
        config.seed, config.variant, config.task, capacity=data.capacity, crop=crop, weights=config.weights
    )
    model.stats = stats
    model.scene_config = data.scene_config or None
    vision, tactile = uses_vision(config.variant), uses_tactile(config.variant)
    images = stats.images(data.images) if vision else None
    tac = stats.tactile(data.tactile) if tactile else None
    targets = (data.volumes / data.capacity).astype(np.float32)
    labels = data.labels
    params = model.parameters()
    n = len(data)
    curve: list[float] = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        lr = config.schedule.lr_at(epoch)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            im = crop_batch(images[idx], crop, rng) if vision else None
            logits, vol = model.forward(im, tac[idx] if tactile else None)
            loss = overall_loss(logits, vol, labels[idx], targets[idx], config.weights, config.task)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            nk.sgd_step(params, lr)
            total += value * len(idx)
        curve.append(total / n)
        log.debug("%s/%s seed=%d epoch %d lr=%g loss=%.5f", config.variant, config.task, config.seed, epoch, lr, curve[-1])
    return TrainResult(model, curve)


def eval_ml_error(model: FusionModel, data: VolumeDataset) -> float:
    """Mean absolute volume error in ml over ``data``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    pred = predict_volumes(model, data.images, data.tactile)
    return float(np.mean(np.abs(pred - data.volumes.astype(np.float64))))


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CellResult:
    variant: str
    task: str
    fold_errors: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_errors))

    @property
    def stderr(self) -> float:
        k = len(self.fold_errors)
        if k < 2:
            return 0.0
        return float(np.std(self.fold_errors, ddof=1) / math.sqrt(k))


def _fold_indices(data: VolumeDataset, folds: np.ndarray, fold: int) -> tuple[np.ndarray, np.ndarray]:
    test = np.flatnonzero(folds == fold)
    train_idx = np.flatnonzero(folds != fold)
    shared = np.intersect1d(data.trial_ids[train_idx], data.trial_ids[test])
    if shared.size:
        raise SplitError(f"fold {fold}: trial ids {shared[:5].tolist()} appear in both train and test")
    return train_idx, test


def run_fold(data: VolumeDataset, config: TrainConfig, folds: np.ndarray, fold: int) -> float:
    train_idx, test_idx = _fold_indices(data, folds, fold)
    train_split = data.subset(train_idx)
    result = train(config, train_split)
    return eval_ml_error(result.model, data.subset(test_idx))


_WORKER_DATA: VolumeDataset | None = None


def _init_worker(data: VolumeDataset) -> None:
    global _WORKER_DATA
    _WORKER_DATA = data


def _worker_fold(args) -> float:
    config, folds, fold = args
    return run_fold(_WORKER_DATA, config, folds, fold)


def _run_jobs(data: VolumeDataset, jobs: list[tuple[TrainConfig, np.ndarray, int]], n_workers: int) -> list[float]:
    if n_workers <= 1 or len(jobs) <= 1:
        return [run_fold(data, *job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_workers, initializer=_init_worker, initargs=(data,)) as pool:
        return list(pool.map(_worker_fold, jobs))


def cross_validate(
    data: VolumeDataset,
    config: TrainConfig,
    k: int = 3,
    folds: np.ndarray | None = None,
    workers: int = 1,
) -> CellResult:
    """Train ``k`` models, each scored on its held-out group of trials."""
    folds = example_folds(data.trial_ids, k, config.seed) if folds is None else np.asarray(folds)
    errors = _run_jobs(data, [(config, folds, f) for f in range(k)], workers)
    return CellResult(config.variant, config.task, errors)


@dataclass
class CvReport:
    cells: list[CellResult]
    dataset_fingerprint: str
    config: dict
    k: int
    fold_seed: int
    seeds: list[int]
    metric: str = ERROR_METRIC

    def cell(self, variant: str, task: str) -> CellResult:
        for c in self.cells:
            if c.variant == variant and c.task == task:
                return c
        raise KeyError((variant, task))

    def table_rows(self) -> list[dict]:
        return [
            {"variant": c.variant, "task": c.task, "mean_ml": f"{c.mean:.6f}", "stderr_ml": f"{c.stderr:.6f}"}
            for c in self.cells
        ]

    def fold_rows(self) -> list[dict]:
        rows = []
        for c in self.cells:
            for f, e in enumerate(c.fold_errors):
                rows.append(
                    {
                        "variant": c.variant,
                        "task": c.task,
                        "fold": f,
                        "error_ml": f"{e:.6f}",
                        "mean_ml": f"{c.mean:.6f}",
                        "stderr_ml": f"{c.stderr:.6f}",
                    }
                )
        return rows

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "dataset_fingerprint": self.dataset_fingerprint,
            "k": self.k,
            "fold_seed": self.fold_seed,
            "seeds": self.seeds,
            "config": self.config,
            "cells": [
                {"variant": c.variant, "task": c.task, "fold_errors_ml": c.fold_errors, "mean_ml": c.mean, "stderr_ml": c.stderr}
                for c in self.cells
            ],
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "report.csv", self.fold_rows())
        write_csv(out / "table.csv", self.table_rows())
        (out / "report.json").write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    def format_table(self) -> str:
        lines = [f"{'':16s}" + "".join(f"{v:>20s}" for v in VARIANTS)]
        for task in TASKS:
            row = f"{task:16s}"
            for v in VARIANTS:
                try:
                    c = self.cell(v, task)
                    row += f"{c.mean:>12.3f} ± {c.stderr:5.3f}"
                except KeyError:
                    row += f"{'-':>20s}"
            lines.append(row)
        return "\n".join(lines)


def write_csv(path, rows: list[dict]) -> None:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    Path(path).write_text(buf.getvalue())


def variant_matrix(
    data: VolumeDataset,
    base: TrainConfig,
    k: int = 3,
    variants=VARIANTS,
    tasks=TASKS,
    workers: int | None = None,
    fold_seed: int | None = None,
) -> CvReport:
    """Cross-validate every (variant, task) cell on one shared fold assignment."""
    fold_seed = base.seed if fold_seed is None else fold_seed
    folds = example_folds(data.trial_ids, k, fold_seed)
    if workers is None:
        workers = os.cpu_count() or 1
    cells = [(v, t) for t in tasks for v in variants]
    jobs = [(replace(base, variant=v, task=t), folds, f) for v, t in cells for f in range(k)]
    errors = _run_jobs(data, jobs, workers)
    results = [CellResult(v, t, errors[i * k : (i + 1) * k]) for i, (v, t) in enumerate(cells)]
    return CvReport(
        cells=results,
        dataset_fingerprint=data.fingerprint(),
        config=base.to_dict(),
        k=k,
        fold_seed=fold_seed,
        seeds=[base.seed],
    )
