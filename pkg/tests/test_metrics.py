import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionbench.metrics import (
    MetricValue,
    dice,
    edt,
    extract_surface,
    nsd,
    overlap_counts,
)
from lesionbench.volume_io import Geometry, LabelMask, ShapeMismatchError
from oracles import brute_force_distances, brute_force_nsd, brute_force_surface


def mask(arr, spacing=(1.0, 1.0, 1.0)):
    return LabelMask.from_array(np.asarray(arr, dtype=np.uint8), spacing=spacing)


def blank(shape=(4, 4, 4)):
    return np.zeros(shape, dtype=np.uint8)


def test_dice_basic_cases():
    a = blank()
    a[1, 1, 1] = a[1, 1, 2] = 1
    b = blank()
    b[1, 1, 1] = b[2, 2, 2] = 1
    assert dice(mask(a), mask(a)).value == 1.0
    assert dice(mask(a), mask(b)).value == 0.5
    assert dice(mask(blank()), mask(blank())) == MetricValue.undefined()
    assert dice(mask(blank()), mask(b)).value == 0.0
    assert dice(mask(a), mask(blank())).value == 0.0


def test_dice_labels_binarized():
    a = blank()
    a[0, 0, 0] = 3
    b = blank()
    b[0, 0, 0] = 1
    assert dice(mask(a), mask(b)).value == 1.0


def test_overlap_counts():
    a = blank()
    a[:2] = 1
    b = blank()
    b[1:3] = 1
    c = overlap_counts(mask(a), mask(b))
    assert (c.gt_voxels, c.pred_voxels, c.intersection_voxels) == (32, 32, 16)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        dice(mask(blank((3, 3, 3))), mask(blank((3, 3, 4))))
    with pytest.raises(ShapeMismatchError):
        nsd(mask(blank()), mask(blank(), spacing=(2, 1, 1)))


def test_surface_examples():
    a = blank((5, 5, 5))
    a[2, 2, 2] = 1
    assert extract_surface(mask(a)) == {(2, 2, 2)}
    cube = blank((5, 5, 5))
    cube[1:4, 1:4, 1:4] = 1
    surf = extract_surface(mask(cube))
    assert len(surf) == 26 and (2, 2, 2) not in surf
    assert extract_surface(mask(blank())) == set()


def test_volume_edge_counts_as_surface():
    full = np.ones((3, 3, 3), np.uint8)
    assert extract_surface(mask(full)) == {
        tuple(i) for i in np.argwhere(np.ones((3, 3, 3)))
    } - {(1, 1, 1)}


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_surface_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    arr = rng.random(tuple(rng.integers(1, 8, 3))) < 0.6
    got = extract_surface(mask(arr))
    assert got == {tuple(int(v) for v in i) for i in np.argwhere(brute_force_surface(arr))}


def test_edt_examples():
    geo = Geometry((5, 5, 1), (1, 1, 1))
    field = edt({(0, 0, 0)}, geo)
    assert field.distances_mm[3, 4, 0] == 5.0
    geo = Geometry((3, 1, 1), (2, 1, 1))
    assert edt({(0, 0, 0)}, geo).distances_mm[1, 0, 0] == 2.0
    assert np.all(np.isinf(edt(set(), Geometry((3, 3, 3), (1, 1, 1))).distances_mm))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_edt_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(n) for n in rng.integers(1, 10, 3))
    spacing = tuple(rng.uniform(0.2, 4.0, 3))
    ref = rng.random(shape) < rng.uniform(0.0, 0.3)
    got = edt(ref, Geometry(shape, spacing)).distances_mm
    want = brute_force_distances(ref, spacing)
    if ref.any():
        assert np.max(np.abs(got - want)) <= 1e-9
        assert np.all(got[ref] == 0)
    else:
        assert np.all(np.isinf(got))


def test_edt_lipschitz():
    rng = np.random.default_rng(11)
    spacing = (0.7, 1.9, 3.1)
    ref = rng.random((12, 12, 12)) < 0.02
    d = edt(ref, Geometry(ref.shape, spacing)).distances_mm
    for axis, s in enumerate(spacing):
        assert np.all(np.abs(np.diff(d, axis=axis)) <= s + 1e-12)


def test_nsd_examples():
    a = blank((3, 1, 1))
    a[0, 0, 0] = 1
    b = blank((3, 1, 1))
    b[1, 0, 0] = 1
    assert nsd(mask(a), mask(b), 1.0).value == 1.0
    assert nsd(mask(a), mask(b), 0.5).value == 0.0
    assert nsd(mask(a), mask(a), 0.5).value == 1.0
    assert not nsd(mask(blank()), mask(blank())).defined
    assert nsd(mask(blank((3, 1, 1))), mask(b)).value == 0.0


def test_nsd_far_blobs():
    a = blank((20, 5, 5))
    a[1:3, 1:3, 1:3] = 1
    b = blank((20, 5, 5))
    b[15:18, 1:4, 1:4] = 1
    assert nsd(mask(a), mask(b), 5.0).value == 0.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), tol=st.sampled_from([0.5, 1.0, 1.5, 2.0, 3.0]))
def test_nsd_matches_brute_force(seed, tol):
    rng = np.random.default_rng(seed)
    shape = tuple(int(n) for n in rng.integers(2, 9, 3))
    spacing = tuple(rng.choice([0.5, 0.8, 1.0, 1.5, 2.0], 3))
    g = rng.random(shape) < rng.uniform(0, 0.5)
    p = rng.random(shape) < rng.uniform(0, 0.5)
    got = nsd(mask(g, spacing), mask(p, spacing), tol)
    want = brute_force_nsd(g, p, spacing, tol)
    assert got.value == want


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_symmetry_and_monotonicity(seed):
    rng = np.random.default_rng(seed)
    shape = (6, 6, 6)
    spacing = tuple(rng.uniform(0.5, 2.0, 3))
    g = mask(rng.random(shape) < 0.3, spacing)
    p = mask(rng.random(shape) < 0.3, spacing)
    assert dice(g, p) == dice(p, g)
    values = [nsd(g, p, t).value for t in (0.5, 1.0, 1.5, 2.5, 4.0)]
    assert values == [nsd(p, g, t).value for t in (0.5, 1.0, 1.5, 2.5, 4.0)]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert values == sorted(values)


def test_translation_invariance():
    rng = np.random.default_rng(5)
    g = np.zeros((20, 20, 20), bool)
    p = np.zeros((20, 20, 20), bool)
    g[5:10, 5:10, 5:10] = rng.random((5, 5, 5)) < 0.7
    p[5:10, 5:10, 5:10] = rng.random((5, 5, 5)) < 0.7
    shifted_g = np.roll(g, (3, -2, 4), axis=(0, 1, 2))
    shifted_p = np.roll(p, (3, -2, 4), axis=(0, 1, 2))
    sp = (1.0, 1.5, 0.7)
    assert dice(mask(g, sp), mask(p, sp)) == dice(mask(shifted_g, sp), mask(shifted_p, sp))
    assert nsd(mask(g, sp), mask(p, sp)) == nsd(mask(shifted_g, sp), mask(shifted_p, sp))


def test_dice_one_iff_identical():
    a = blank()
    a[1:3, 1:3, 1:3] = 1
    b = a.copy()
    b[0, 0, 0] = 1
    assert dice(mask(a), mask(a)).value == 1.0
    assert dice(mask(a), mask(b)).value < 1.0


def test_nsd_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        nsd(mask(blank()), mask(blank()), 0.0)
