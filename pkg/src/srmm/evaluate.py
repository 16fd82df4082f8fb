"""Metrics, degradation sweeps and block-2 embedding dumps."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import MaskSpec, NoiseSpec, PairedDataset, apply_mask, corrupt, derive_seed
from .errors import DomainError, MetricUndefinedError, ShapeError
from .models import Model, branch_forward, forward, model_sha, predict_dataset

MISSING_GRID = (1.0, 0.9, 0.7, 0.5, 0.3, 0.1, 0.0)
NOISE_SIGMAS = (0.0, 0.1, 0.5, 1.0)


@dataclass(frozen=True)
class MetricValue:
    kind: str
    value: float
    n: int


def accuracy(predicted, labels) -> MetricValue:
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if predicted.shape != labels.shape:
        raise ShapeError(f"accuracy: {predicted.size} predictions for {labels.size} labels")
    if labels.size == 0:
        raise ShapeError("accuracy of an empty prediction set is undefined")
    return MetricValue("accuracy", float(np.mean(predicted == labels)), int(labels.size))


def midranks(values):
    """1-based ranks with tied values sharing the mean of their positions."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    # run boundaries of equal values
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], values.size]
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(values.size)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def auroc(scores, labels) -> MetricValue:
    """Mann-Whitney AUROC with midrank tie correction."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ShapeError(f"auroc: {scores.size} scores for {labels.size} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUROC needs both positive and negative instances")
    r_pos = midranks(scores)[pos].sum()
    value = (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return MetricValue("auroc", float(value), int(labels.size))


def degradation_delta(p_complete, p_missing) -> float:
    """Relative drop ``(P_complete - P_missing) / P_complete``."""
    if p_complete <= 0:
        raise DomainError(f"complete-modality performance must be positive, got {p_complete}")
    return (p_complete - p_missing) / p_complete


def format_delta(delta) -> str:
    return f"{100.0 * delta:.1f}%"


def score(model: Model, ds: PairedDataset, metric="accuracy", fusion_space="prob") -> MetricValue:
    preds = predict_dataset(model, ds, fusion_space)
    if metric == "accuracy":
        return accuracy(preds.predicted, ds.labels)
    if metric == "auroc":
        if model.config.num_classes != 2:
            raise MetricUndefinedError("AUROC is defined only for binary tasks")
        return auroc(preds.probs[:, 1], ds.labels)
    raise DomainError(f"unknown metric {metric!r}")


# -- sweeps ------------------------------------------------------------------


@dataclass
class SweepReport:
    kind: str
    grid: list
    metric_kind: str
    values: list
    deltas: list
    n: list
    target: str
    seed: int
    model_sha: str
    strategy: str | None = None
    sigma: list | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, json_path=None, csv_path=None):
        if json_path:
            with open(json_path, "w", encoding="utf-8") as f:
                f.write(self.to_json() + "\n")
        if csv_path:
            with open(csv_path, "w", newline="", encoding="utf-8") as f:
                w = csv.writer(f)
                w.writerow(["level", "value", "delta"])
                for level, value, delta in zip(self.grid, self.values, self.deltas):
                    w.writerow([repr(level), repr(value), repr(delta)])


def sweep_workers():
    env = os.environ.get("MODINV_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _run_levels(fn, levels):
    workers = min(sweep_workers(), len(levels))
    if workers <= 1:
        return [fn(level) for level in levels]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, levels))


def mask_seed(seed, level):
    return derive_seed(seed, "mask-level", float(level))


def sweep_missing(
    model: Model, ds: PairedDataset, target_modality="B", grid=MISSING_GRID, seed=0,
    metric="accuracy", fusion_space="prob", strategy=None,
) -> SweepReport:
    """Metric and degradation at each availability level of one modality."""
    grid = [float(g) for g in grid]
    if 1.0 not in grid:
        raise DomainError("availability grid must contain 1.0 (the complete-modality reference)")

    def level_metric(level):
        masked = apply_mask(ds, MaskSpec(target_modality, level, mask_seed(seed, level)))
        return score(model, masked, metric, fusion_space)

    results = _run_levels(level_metric, grid)
    complete = results[grid.index(1.0)].value
    return SweepReport(
        kind="missing", grid=grid, metric_kind=metric,
        values=[r.value for r in results],
        deltas=[degradation_delta(complete, r.value) for r in results],
        n=[r.n for r in results], target=target_modality, seed=int(seed),
        model_sha=model_sha(model), strategy=strategy,
    )


def noise_seed(seed, sigma):
    return derive_seed(seed, "noise-level", float(sigma))


def sweep_corruption(
    model: Model, ds: PairedDataset, sigmas=NOISE_SIGMAS, seed=0, metric="accuracy",
    fusion_space="prob", target_modality="both", strategy=None,
) -> SweepReport:
    """Metric with every available vector of the target modalities noised at each sigma."""
    sigmas = [float(s) for s in sigmas]
    clean = score(model, ds, metric, fusion_space).value

    def level_metric(sigma):
        noisy = corrupt(ds, NoiseSpec(sigma, 0.0, 1.0, noise_seed(seed, sigma)), target_modality)
        return score(model, noisy, metric, fusion_space)

    results = _run_levels(level_metric, sigmas)
    return SweepReport(
        kind="corruption", grid=sigmas, metric_kind=metric,
        values=[r.value for r in results],
        deltas=[degradation_delta(clean, r.value) for r in results],
        n=[r.n for r in results], target=target_modality, seed=int(seed),
        model_sha=model_sha(model), strategy=strategy, sigma=sigmas,
        extra={"clean_value": clean},
    )


# -- embedding dumps ----------------------------------------------------------


def block2_rows(model: Model, ds: PairedDataset, modalities=("A", "B")):
    """Yield ``(id, label, modality, vector)`` for every available requested modality.

    Early/mid fusion models have one joint embedding per instance (modality
    ``fused``, missing inputs zero-filled).
    """
    rows = []
    if model.is_single_branch or model.fusion == "late":
        for m in modalities:
            idx = np.flatnonzero(ds.avail(m))
            if idx.size == 0:
                continue
            emb = branch_forward(model, m, ds.vectors(m)[idx]).embedding
            rows.extend(zip(ds.ids[idx], ds.labels[idx], [m] * idx.size, emb))
        rows.sort(key=lambda r: (int(r[0]), r[2]))
        return rows
    x_a = np.where(ds.avail_a[:, None], ds.x_a, 0.0)
    x_b = np.where(ds.avail_b[:, None], ds.x_b, 0.0)
    emb = forward(model, (x_a, x_b)).embedding
    return list(zip(ds.ids, ds.labels, ["fused"] * len(ds), emb))


def dump_block2(model: Model, ds: PairedDataset, path, modalities=("A", "B")) -> int:
    """Write block-2 embeddings as CSV ``id,label,modality,e0..``; returns row count."""
    rows = block2_rows(model, ds, modalities)
    width = model.config.layer_dim
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["id", "label", "modality"] + [f"e{j}" for j in range(width)])
        for iid, label, m, vec in rows:
            w.writerow([int(iid), int(label), m] + [repr(float(v)) for v in vec])
    return len(rows)


def read_dump(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = list(reader)
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    modality = [r[2] for r in rows]
    vectors = np.array([[float(v) for v in r[3:]] for r in rows]).reshape(len(rows), len(header) - 3)
    return header, ids, labels, modality, vectors
