"""Slow, direct reference computations used only by the tests."""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def brute_force_distances(reference: np.ndarray, spacing) -> np.ndarray:
    """All-pairs Euclidean distance in mm from every voxel to the nearest reference voxel."""
    shape = reference.shape
    refs = np.argwhere(reference).astype(np.float64) * np.asarray(spacing)
    grid = np.indices(shape).reshape(3, -1).T.astype(np.float64) * np.asarray(spacing)
    if len(refs) == 0:
        return np.full(shape, np.inf)
    best = np.full(len(grid), np.inf)
    for r in refs:
        d = np.sqrt(((grid - r) ** 2).sum(axis=1))
        np.minimum(best, d, out=best)
    return best.reshape(shape)


def brute_force_surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one of six face neighbours off the mask or out of bounds."""
    out = np.zeros(mask.shape, dtype=bool)
    nx, ny, nz = mask.shape
    for i, j, k in np.argwhere(mask):
        for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = i + di, j + dj, k + dk
            if not (0 <= a < nx and 0 <= b < ny and 0 <= c < nz) or not mask[a, b, c]:
                out[i, j, k] = True
                break
    return out


def brute_force_nsd(gt: np.ndarray, pred: np.ndarray, spacing, tol: float):
    """Surface Dice from explicit pairwise distances between surface voxel centers."""
    if not gt.any() and not pred.any():
        return None
    if not gt.any() or not pred.any():
        return 0.0
    sp = np.asarray(spacing, dtype=np.float64)
    sg = np.argwhere(brute_force_surface(gt)) * sp
    sq = np.argwhere(brute_force_surface(pred)) * sp
    pair = np.sqrt(((sg[:, None, :] - sq[None, :, :]) ** 2).sum(axis=2))
    limit = tol + 1e-9
    gt_hits = int((pair.min(axis=1) <= limit).sum())
    pred_hits = int((pair.min(axis=0) <= limit).sum())
    return (gt_hits + pred_hits) / (len(sg) + len(sq))


def trilinear_at(data: np.ndarray, x: float, y: float, z: float) -> float:
    """Trilinear value at continuous index (x, y, z) with coordinates clamped to the volume."""
    coords = []
    for c, n in zip((x, y, z), data.shape):
        c = min(max(c, 0.0), n - 1.0)
        lo = int(math.floor(c))
        hi = min(lo + 1, n - 1)
        coords.append((lo, hi, c - lo))
    (x0, x1, fx), (y0, y1, fy), (z0, z1, fz) = coords
    total = 0.0
    for xi, wx in ((x0, 1 - fx), (x1, fx)):
        for yi, wy in ((y0, 1 - fy), (y1, fy)):
            for zi, wz in ((z0, 1 - fz), (z1, fz)):
                total += wx * wy * wz * float(data[xi, yi, zi])
    return total


def _floor_log2(a: Fraction) -> int:
    e = a.numerator.bit_length() - a.denominator.bit_length()
    if a < Fraction(2) ** e:
        e -= 1
    return e


def round_to_binary16(x) -> float:
    """IEEE binary16 round-to-nearest-even, computed with exact rationals."""
    if x == 0:
        return 0.0
    sign = -1 if x < 0 else 1
    a = abs(Fraction(x))
    exponent = max(_floor_log2(a), -14)  # clamped to the subnormal range
    quantum = Fraction(2) ** (exponent - 10)
    q = round(a / quantum)  # Fraction.__round__ ties to even
    value = q * quantum
    if value > 65504:
        return sign * math.inf
    return sign * float(value)


def round_to_binary32(x) -> float:
    if x == 0:
        return 0.0
    sign = -1 if x < 0 else 1
    a = abs(Fraction(x))
    exponent = max(_floor_log2(a), -126)
    quantum = Fraction(2) ** (exponent - 23)
    return sign * float(round(a / quantum) * quantum)


def emulated_mean(values, rounder) -> float:
    """Mean with every load, addition and the final division passed through ``rounder``."""
    acc = Fraction(rounder(values[0]))
    for v in values[1:]:
        acc = Fraction(rounder(acc + Fraction(rounder(v))))
    return rounder(acc / len(values))
