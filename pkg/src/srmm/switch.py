"""Modality switching: which modality's embedding each training sample feeds.

* ``S1`` - every batch is multimodal; each sample picks one of its
  available modalities uniformly at random.
* ``S2`` - each batch is multimodal (as S1) or unimodal on a fair coin.
* ``S3`` - every batch is unimodal with a uniformly chosen modality.

A unimodal batch uses its drawn modality only for samples that have it.
When the drawn modality is missing for some member, the batch switches to
the other modality if every member has that one; otherwise the members
lacking the drawn modality fall back to the one they have.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AvailabilityError, ConfigError

MOD_A, MOD_B = 0, 1

_FRACTIONS = {"S1": 1.0, "S2": 0.5, "S3": 0.0}


@dataclass(frozen=True)
class SwitchStrategy:
    tag: str = "S1"

    def __post_init__(self):
        if self.tag not in _FRACTIONS:
            raise ConfigError(f"unknown switching strategy {self.tag!r}; choose from S1, S2, S3")

    @property
    def multimodal_batch_fraction(self):
        return _FRACTIONS[self.tag]

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        return cls(str(value).upper().replace("-", ""))


@dataclass
class Batch:
    index: np.ndarray  # row positions in the dataset
    modality: np.ndarray  # MOD_A / MOD_B per row
    multimodal: bool


@dataclass
class BatchPlan:
    batches: list
    epoch_seed: int
    ids: np.ndarray | None = None

    def __len__(self):
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)


def _epoch_rng(seed, epoch_index):
    return np.random.default_rng([int(seed), int(epoch_index), 0x5357])


def plan_epoch(avail_a, avail_b, strategy, batch_size, epoch_index, seed, ids=None) -> BatchPlan:
    """Shuffle, partition into ``ceil(N / batch_size)`` batches and assign modalities."""
    strategy = SwitchStrategy.parse(strategy)
    avail_a = np.asarray(avail_a, dtype=bool)
    avail_b = np.asarray(avail_b, dtype=bool)
    n = avail_a.size
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    if n == 0:
        raise ConfigError("cannot plan an epoch over an empty dataset")
    none = ~(avail_a | avail_b)
    if none.any():
        k = int(np.flatnonzero(none)[0])
        who = ids[k] if ids is not None else k
        raise AvailabilityError(f"instance {who} has no available modality")

    rng = _epoch_rng(seed, epoch_index)
    order = rng.permutation(n)
    batches = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        a, b = avail_a[idx], avail_b[idx]
        if strategy.tag == "S1":
            multimodal = True
        elif strategy.tag == "S2":
            multimodal = bool(rng.random() < 0.5)
        else:
            multimodal = False

        if multimodal:
            coin = rng.random(idx.size) < 0.5
            modality = np.where(a & b, np.where(coin, MOD_A, MOD_B), np.where(a, MOD_A, MOD_B))
        else:
            pick = MOD_A if rng.random() < 0.5 else MOD_B
            has_pick, has_other = (a, b) if pick == MOD_A else (b, a)
            if not has_pick.all() and has_other.all():
                pick = 1 - pick
                has_pick = has_other
            modality = np.where(has_pick, pick, 1 - pick)
        batches.append(Batch(idx, modality.astype(np.int8), multimodal))
    return BatchPlan(batches, epoch_seed=int(seed), ids=ids)


def strategy_stats(plan: BatchPlan) -> dict:
    """Exact modality counts per batch and over the whole plan."""
    per_batch = []
    total_a = total = n_multimodal = n_mixed = 0
    for batch in plan.batches:
        n_a = int((batch.modality == MOD_A).sum())
        n = int(batch.modality.size)
        per_batch.append({"a": n_a, "b": n - n_a, "multimodal": batch.multimodal})
        total_a += n_a
        total += n
        n_multimodal += batch.multimodal
        n_mixed += 0 < n_a < n
    n_batches = len(plan.batches)
    return {
        "per_batch": per_batch,
        "samples": total,
        "fraction_a": total_a / total if total else 0.0,
        "fraction_b": (total - total_a) / total if total else 0.0,
        "batches": n_batches,
        "multimodal_batch_fraction": n_multimodal / n_batches if n_batches else 0.0,
        "mixed_batches": n_mixed,
    }
