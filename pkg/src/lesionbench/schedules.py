"""Training-side arithmetic: dataset sampling weights, learning-rate schedules, folds.

Random streams come from numpy's Philox generator, a counter-based bit
generator whose output for a given seed is identical on every platform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np


@dataclass(frozen=True)
class SamplingPlan:
    dataset_ids: tuple
    sizes: tuple[int, ...]
    probabilities: tuple[float, ...]


def sampling_weights(sizes: Sequence[int], dataset_ids: Sequence[Hashable] | None = None) -> SamplingPlan:
    """Probability of each dataset proportional to 1 / sqrt(number of images)."""
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise ValueError("need at least one dataset")
    if min(sizes) < 1:
        raise ValueError(f"dataset sizes must be >= 1, got {sizes}")
    if dataset_ids is None:
        dataset_ids = list(range(len(sizes)))
    if len(dataset_ids) != len(sizes):
        raise ValueError("dataset_ids and sizes differ in length")
    weights = [1.0 / math.sqrt(s) for s in sizes]
    total = math.fsum(weights)
    return SamplingPlan(tuple(dataset_ids), tuple(sizes), tuple(w / total for w in weights))


def _philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def sample_sequence(plan: SamplingPlan, seed: int, count: int) -> list:
    """Draw ``count`` dataset ids i.i.d. from the plan."""
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return []
    cdf = np.cumsum(plan.probabilities)
    cdf[-1] = 1.0
    u = _philox(seed).random(count)
    idx = np.searchsorted(cdf, u, side="right")
    np.minimum(idx, len(cdf) - 1, out=idx)
    return [plan.dataset_ids[i] for i in idx]


@dataclass(frozen=True)
class LrSchedule:
    """Polynomial decay, optionally preceded by a linear warm-up.

    During warm-up the rate is ``lr * (epoch + 1) / warmup_epochs``; afterwards
    the poly curve restarts over the remaining ``total - warmup`` epochs.
    """

    lr: float
    total_epochs: int
    warmup_epochs: int = 0
    exponent: float = 0.9
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must lie in [0, total_epochs)")
        meta = {
            "variant": self.variant,
            "warmup_ramp": "lr*(epoch+1)/warmup_epochs",
            "poly_clock": "restarts after warm-up",
        }
        meta.update(self.metadata)
        object.__setattr__(self, "metadata", meta)

    @property
    def variant(self) -> str:
        return "warmup_then_poly" if self.warmup_epochs else "poly"

    @classmethod
    def poly(cls, lr0: float, total_epochs: int, exponent: float = 0.9) -> "LrSchedule":
        return cls(lr0, total_epochs, 0, exponent)

    @classmethod
    def warmup_then_poly(
        cls, target: float, warmup_epochs: int, total_epochs: int, exponent: float = 0.9
    ) -> "LrSchedule":
        if warmup_epochs < 1:
            raise ValueError("warmup_epochs must be >= 1")
        return cls(target, total_epochs, warmup_epochs, exponent)

    def lr_at(self, epoch: int) -> float:
        if not 0 <= epoch < self.total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {self.total_epochs})")
        w = self.warmup_epochs
        if epoch < w:
            return self.lr * ((epoch + 1) / w)
        return self.lr * (1.0 - (epoch - w) / (self.total_epochs - w)) ** self.exponent

    def table(self) -> list[tuple[int, float]]:
        return [(e, self.lr_at(e)) for e in range(self.total_epochs)]


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    return schedule.lr_at(epoch)


def make_folds(case_ids: Sequence, k: int = 5, seed: int = 0) -> list[list]:
    """Seeded shuffle, then round-robin into ``k`` folds."""
    ids = list(case_ids)
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(ids) < k:
        raise ValueError(f"{len(ids)} cases cannot fill {k} folds")
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    order = _philox(seed).permutation(len(ids))
    folds: list[list] = [[] for _ in range(k)]
    for pos, i in enumerate(order):
        folds[pos % k].append(ids[i])
    return folds
