"""Probability-map ensembling at a controlled arithmetic precision.

Half and single precision are emulated: every loaded value, every partial
sum and the final division are rounded to the target format with
round-to-nearest-even. The arithmetic itself runs in float64, whose 53-bit
significand exceeds twice the target precision plus two for both formats, so
rounding the exact-in-float64 sum or quotient once gives the correctly
rounded target result. Accumulation follows input order.

Double precision is the reference: per voxel the values are sorted, summed
with error-free transformations into a double-double and divided once with
a residual correction. The result is independent of model order and lies
within one ulp of the exact mean. It is correctly rounded whenever the
double-double holds the exact sum; a tie decided by bits more than about
106 places below the leading one can still round the other way.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume_io import (
    Geometry,
    LabelMask,
    ShapeMismatchError,
    read_nifti_array,
    write_nifti_array,
)


class PrecisionMode(enum.Enum):
    HALF = "half"
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype({"half": np.float16, "single": np.float32, "double": np.float64}[self.value])

    def quantize(self, x: np.ndarray) -> np.ndarray:
        """Round float64 values to this mode and return them as float64."""
        if self is PrecisionMode.DOUBLE:
            return np.asarray(x, dtype=np.float64)
        return np.asarray(x, dtype=np.float64).astype(self.dtype).astype(np.float64)


SUM_TOLERANCE = {PrecisionMode.HALF: 1e-2, PrecisionMode.SINGLE: 1e-5, PrecisionMode.DOUBLE: 1e-5}


@dataclass(frozen=True, eq=False)
class ProbabilityStack:
    """Per-class probabilities shaped ``(C, nx, ny, nz)``.

    ``mode`` records the precision that produced the values (None for raw
    model output); it also sets the tolerance on class sums.
    """

    probs: np.ndarray
    geometry: Geometry
    mode: PrecisionMode | None = None

    def __post_init__(self):
        probs = np.asarray(self.probs)
        if probs.ndim != 4 or probs.shape[1:] != self.geometry.dims:
            raise ShapeMismatchError(
                f"probabilities shaped {probs.shape} do not match (C, *{self.geometry.dims})"
            )
        if probs.shape[0] < 2:
            raise ValueError("need at least two classes")
        if probs.size and (probs.min() < 0 or probs.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        tol = SUM_TOLERANCE[self.mode] if self.mode is not None else 1e-5
        sums = probs.sum(axis=0, dtype=np.float64)
        if np.abs(sums - 1.0).max(initial=0.0) > tol:
            raise ValueError(f"class probabilities must sum to 1 within {tol}")
        view = probs.view()
        view.flags.writeable = False
        object.__setattr__(self, "probs", view)

    @classmethod
    def from_array(cls, probs, spacing=(1.0, 1.0, 1.0), affine=None, mode=None):
        probs = np.asarray(probs)
        return cls(probs, Geometry(probs.shape[1:], spacing, affine), mode)

    @property
    def n_classes(self) -> int:
        return self.probs.shape[0]


def ensemble_probs(
    stacks: Sequence[ProbabilityStack], mode: PrecisionMode | str = PrecisionMode.SINGLE
) -> ProbabilityStack:
    """Per-voxel mean of the stacks' class probabilities at precision ``mode``.

    Sums are accumulated in list order and divided by the count once.
    """
    mode = PrecisionMode(mode)
    if not stacks:
        raise ValueError("need at least one probability stack")
    first = stacks[0]
    for s in stacks[1:]:
        if s.probs.shape != first.probs.shape or not s.geometry.same_lattice(first.geometry):
            raise ShapeMismatchError(
                f"stack shaped {s.probs.shape} does not match {first.probs.shape}"
            )
    if mode is PrecisionMode.DOUBLE:
        mean = _compensated_mean([s.probs for s in stacks])
    else:
        acc = mode.quantize(first.probs)
        for s in stacks[1:]:
            acc = mode.quantize(acc + mode.quantize(s.probs))
        mean = mode.quantize(acc / len(stacks))
    return ProbabilityStack(mean.astype(mode.dtype), first.geometry, mode)


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _split(a):
    t = 134217729.0 * a  # 2**27 + 1
    hi = t - (t - a)
    return hi, a - hi


def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def _compensated_mean(arrays) -> np.ndarray:
    values = np.sort(np.stack([np.asarray(a, dtype=np.float64) for a in arrays]), axis=0)
    total = values[0].copy()
    err = np.zeros_like(total)
    for v in values[1:]:
        total, e = _two_sum(total, v)
        err += e
    total, err = _two_sum(total, err)
    k = float(len(arrays))
    q = total / k
    p, pe = _two_prod(q, np.full_like(q, k))
    return q + (((total - p) - pe) + err) / k


def argmax_labels(stack: ProbabilityStack) -> LabelMask:
    """Class of highest probability per voxel, lowest index on ties."""
    labels = np.argmax(stack.probs, axis=0)
    dtype = np.uint8 if stack.n_classes <= 256 else np.int16
    return LabelMask(labels.astype(dtype), stack.geometry)


@dataclass(frozen=True)
class Disagreement:
    count: int
    indices: list[tuple[int, int, int]]
    total_voxels: int

    @property
    def identical(self) -> bool:
        return self.count == 0

    def as_dict(self) -> dict:
        return {
            "count": self.count,
            "total_voxels": self.total_voxels,
            "indices": [list(i) for i in self.indices],
        }


def compare_labelings(a: LabelMask, b: LabelMask, max_listed: int = 100) -> Disagreement:
    """Count voxels whose labels differ; list up to ``max_listed`` of them in C order."""
    if a.geometry.dims != b.geometry.dims:
        raise ShapeMismatchError(f"dims differ: {a.dims} vs {b.dims}")
    diff = np.asarray(a.labels) != np.asarray(b.labels)
    count = int(np.count_nonzero(diff))
    listed = [tuple(int(v) for v in idx) for idx in np.argwhere(diff)[:max_listed]]
    return Disagreement(count, listed, int(diff.size))


def read_prob_stack(path, mode: PrecisionMode | None = None) -> ProbabilityStack:
    """Load a NIfTI file whose fourth axis holds the C class probabilities.

    Pass the ``mode`` that produced the file when reading back ensembled
    half-precision output, whose class sums are only good to 1e-2.
    """
    data, geometry = read_nifti_array(path)
    if data.ndim != 4:
        raise ShapeMismatchError(f"{path}: expected a 4D probability volume, got {data.shape}")
    return ProbabilityStack(np.moveaxis(data, 3, 0), geometry, mode)


def write_prob_stack(stack: ProbabilityStack, path, **kwargs) -> None:
    probs = stack.probs
    if probs.dtype == np.float16:
        probs = probs.astype(np.float32)
    write_nifti_array(np.moveaxis(probs, 0, 3), stack.geometry, path, **kwargs)
