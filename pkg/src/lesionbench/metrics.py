"""Dice, surface extraction, exact Euclidean distance transform and surface Dice.

Values are fractions in [0, 1]; reporting code scales them to percent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .volume_io import Geometry, LabelMask, ShapeMismatchError

BOTH_EMPTY = "both_empty"
DEFINED = "defined"

# absorbs floating-point ties at the tolerance boundary
TOLERANCE_SLACK_MM = 1e-9


@dataclass(frozen=True)
class MetricValue:
    value: float | None
    basis: str = DEFINED

    def __post_init__(self):
        if self.basis not in (BOTH_EMPTY, DEFINED):
            raise ValueError(f"unknown basis {self.basis!r}")
        if (self.value is None) != (self.basis == BOTH_EMPTY):
            raise ValueError("value must be None exactly when both masks are empty")

    @classmethod
    def undefined(cls) -> "MetricValue":
        return cls(None, BOTH_EMPTY)

    @property
    def defined(self) -> bool:
        return self.basis == DEFINED


@dataclass(frozen=True)
class OverlapCounts:
    gt_voxels: int
    pred_voxels: int
    intersection_voxels: int

    def __post_init__(self):
        if self.intersection_voxels > min(self.gt_voxels, self.pred_voxels):
            raise ValueError("intersection exceeds the smaller mask")


@dataclass(frozen=True, eq=False)
class DistanceField:
    geometry: Geometry
    distances_mm: np.ndarray


def _foreground(mask) -> np.ndarray:
    if isinstance(mask, LabelMask):
        return mask.foreground()
    return np.asarray(mask) != 0


def _check_pair(gt, pred, case_id=None) -> None:
    gdims = gt.geometry.dims if isinstance(gt, LabelMask) else np.shape(gt)
    pdims = pred.geometry.dims if isinstance(pred, LabelMask) else np.shape(pred)
    if tuple(gdims) != tuple(pdims):
        raise ShapeMismatchError(f"dims differ: {tuple(gdims)} vs {tuple(pdims)}", case_id)
    if isinstance(gt, LabelMask) and isinstance(pred, LabelMask):
        if not gt.geometry.same_lattice(pred.geometry):
            raise ShapeMismatchError(
                f"spacing differs: {gt.spacing} vs {pred.spacing}", case_id
            )


def overlap_counts(gt, pred) -> OverlapCounts:
    g = _foreground(gt)
    p = _foreground(pred)
    return OverlapCounts(
        int(np.count_nonzero(g)), int(np.count_nonzero(p)), int(np.count_nonzero(g & p))
    )


def dice(gt: LabelMask, pred: LabelMask) -> MetricValue:
    """Dice overlap 2|A & B| / (|A| + |B|) of the foregrounds."""
    _check_pair(gt, pred)
    c = overlap_counts(gt, pred)
    total = c.gt_voxels + c.pred_voxels
    if total == 0:
        return MetricValue.undefined()
    return MetricValue(2.0 * c.intersection_voxels / total)


def surface_mask(mask) -> np.ndarray:
    """Boolean array of foreground voxels with a background or out-of-volume face neighbor."""
    fg = _foreground(mask)
    padded = np.pad(fg, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (-1, 1):
            sl = [slice(1, -1)] * 3
            sl[axis] = slice(1 + shift, padded.shape[axis] - 1 + shift)
            interior &= padded[tuple(sl)]
    return fg & ~interior


def extract_surface(mask) -> set[tuple[int, int, int]]:
    """Surface voxel indices under 6-connectivity."""
    return {tuple(int(v) for v in idx) for idx in np.argwhere(surface_mask(mask))}


@numba.njit(cache=True)
def _envelope_1d(f, weight, out, v, z):
    # Lower envelope of parabolas weight*(x - q)^2 + f[q]; infinite f entries
    # contribute no parabola.
    n = f.shape[0]
    k = -1
    for q in range(n):
        if f[q] == np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        fq = f[q] + weight * q * q
        while True:
            p = v[k]
            s = (fq - (f[p] + weight * p * p)) / (2.0 * weight * (q - p))
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        k += 1
        v[k] = q
        z[k] = -np.inf if k == 0 else s
        z[k + 1] = np.inf
    if k < 0:
        for q in range(n):
            out[q] = np.inf
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        d = q - v[j]
        out[q] = weight * d * d + f[v[j]]


@numba.njit(cache=True)
def _squared_edt_inplace(sq, w0, w1, w2):
    nx, ny, nz = sq.shape
    n = max(nx, ny, nz)
    f = np.empty(n)
    out = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    for j in range(ny):
        for k in range(nz):
            for i in range(nx):
                f[i] = sq[i, j, k]
            _envelope_1d(f[:nx], w0, out[:nx], v, z)
            for i in range(nx):
                sq[i, j, k] = out[i]
    for i in range(nx):
        for k in range(nz):
            for j in range(ny):
                f[j] = sq[i, j, k]
            _envelope_1d(f[:ny], w1, out[:ny], v, z)
            for j in range(ny):
                sq[i, j, k] = out[j]
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                f[k] = sq[i, j, k]
            _envelope_1d(f[:nz], w2, out[:nz], v, z)
            for k in range(nz):
                sq[i, j, k] = out[k]


def squared_edt(reference: np.ndarray, spacing) -> np.ndarray:
    """Squared distance (mm^2) from every voxel center to the nearest True voxel."""
    sq = np.where(np.asarray(reference, dtype=bool), 0.0, np.inf)
    sx, sy, sz = (float(s) for s in spacing)
    _squared_edt_inplace(sq, sx * sx, sy * sy, sz * sz)
    return sq


def edt(reference, geometry: Geometry) -> DistanceField:
    """Exact Euclidean distance in mm from each voxel to the reference set.

    ``reference`` is a boolean array shaped like the geometry or an iterable
    of ``(i, j, k)`` indices. Distances are +inf everywhere if it is empty.
    """
    if isinstance(reference, np.ndarray) and reference.shape == geometry.dims:
        ref = reference.astype(bool)
    else:
        ref = np.zeros(geometry.dims, dtype=bool)
        idx = np.array(sorted(reference), dtype=np.intp).reshape(-1, 3)
        if len(idx):
            ref[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return DistanceField(geometry, np.sqrt(squared_edt(ref, geometry.spacing)))


def _crop_box(*masks: np.ndarray) -> tuple[slice, ...]:
    union = np.zeros(masks[0].shape, dtype=bool)
    for m in masks:
        union |= m
    box = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.flatnonzero(union.any(axis=other))
        box.append(slice(int(hit[0]), int(hit[-1]) + 1))
    return tuple(box)


def surface_overlap_counts(gt, pred, spacing, tolerance_mm: float):
    """Return ``(pred_hits, n_pred_surface, gt_hits, n_gt_surface)``.

    A surface voxel of one mask is a hit when the nearest surface voxel of the
    other mask lies within the tolerance.
    """
    s_gt = surface_mask(gt)
    s_pred = surface_mask(pred)
    n_gt = int(np.count_nonzero(s_gt))
    n_pred = int(np.count_nonzero(s_pred))
    if n_gt == 0 or n_pred == 0:
        return 0, n_pred, 0, n_gt
    # distances are only queried at surface voxels, so the transform can run
    # on the bounding box of both surfaces without changing any value
    box = _crop_box(s_gt, s_pred)
    s_gt, s_pred = s_gt[box], s_pred[box]
    limit = tolerance_mm + TOLERANCE_SLACK_MM
    d_to_gt = np.sqrt(squared_edt(s_gt, spacing)[s_pred])
    d_to_pred = np.sqrt(squared_edt(s_pred, spacing)[s_gt])
    pred_hits = int(np.count_nonzero(d_to_gt <= limit))
    gt_hits = int(np.count_nonzero(d_to_pred <= limit))
    return pred_hits, n_pred, gt_hits, n_gt


def nsd(gt: LabelMask, pred: LabelMask, tolerance_mm: float = 1.0) -> MetricValue:
    """Normalized surface Dice at ``tolerance_mm`` between voxel-center surfaces."""
    if not tolerance_mm > 0:
        raise ValueError(f"tolerance_mm must be positive, got {tolerance_mm}")
    _check_pair(gt, pred)
    g = _foreground(gt)
    p = _foreground(pred)
    g_any, p_any = bool(g.any()), bool(p.any())
    if not g_any and not p_any:
        return MetricValue.undefined()
    if not (g_any and p_any):
        return MetricValue(0.0)
    spacing = gt.spacing if isinstance(gt, LabelMask) else (1.0, 1.0, 1.0)
    pred_hits, n_pred, gt_hits, n_gt = surface_overlap_counts(g, p, spacing, tolerance_mm)
    return MetricValue((pred_hits + gt_hits) / (n_pred + n_gt))
