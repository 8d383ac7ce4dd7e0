import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from conftest import make_rig
from semstereo.errors import ArgumentError, InsufficientOverlapError
from semstereo.rasters import HeightField
from semstereo.registration import (
    AlignmentResult,
    Translation3D,
    align_translation_mi,
    apply_alignment,
    estimate_3d_translation,
    mutual_information,
)


def entropy_oracle(a, bins=64):
    counts, _ = np.histogram(a, bins=bins, range=(a.min(), a.max()))
    p = counts[counts > 0] / a.size
    return float(-(p * np.log2(p)).sum())


def structured(seed, shape=(96, 96)):
    rng = np.random.default_rng(seed)
    return ndimage.gaussian_filter(rng.random(shape), 1.5) + 0.2 * rng.random(shape)


def shifted(img, dx, dy):
    """moving[r, c] = img[r - dy, c - dx], invalid where the source is outside."""
    out = np.full(img.shape, np.nan)
    rows, cols = img.shape
    out[max(0, dy) : rows + min(0, dy), max(0, dx) : cols + min(0, dx)] = img[
        max(0, -dy) : rows + min(0, -dy), max(0, -dx) : cols + min(0, -dx)
    ]
    return out


# -- mutual information ---------------------------------------------------------


def test_mi_identity_equals_entropy():
    a = np.random.default_rng(0).random((64, 64))
    assert mutual_information(a, a) == pytest.approx(entropy_oracle(a), abs=1e-12)


def test_mi_constant_is_zero():
    a = np.random.default_rng(0).random((32, 32))
    assert mutual_information(np.full_like(a, 0.3), a) == 0.0


def test_mi_independent_noise_small():
    vals = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        vals.append(mutual_information(rng.random((256, 256)), rng.random((256, 256))))
    assert np.mean(vals) < 0.1
    assert max(vals) < 0.1


def test_mi_nodata_excluded_pairwise():
    rng = np.random.default_rng(1)
    a, b = rng.random((40, 40)), rng.random((40, 40))
    a2 = a.copy()
    a2[:5] = np.nan
    assert mutual_information(a2, b) == pytest.approx(mutual_information(a[5:], b[5:]), abs=1e-12)


def test_mi_errors():
    with pytest.raises(InsufficientOverlapError):
        mutual_information(np.ones((9, 9)), np.ones((9, 9)))
    with pytest.raises(ArgumentError):
        mutual_information(np.ones((20, 20)), np.ones((20, 21)))
    with pytest.raises(ArgumentError):
        mutual_information(np.ones((20, 20)), np.ones((20, 20)), bins=1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), bins=st.integers(2, 64))
def test_mi_symmetric(seed, bins):
    rng = np.random.default_rng(seed)
    a = rng.random((24, 24))
    b = a + rng.normal(0, 0.3, a.shape)
    assert mutual_information(a, b, bins) == mutual_information(b, a, bins)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100), offset=st.floats(-50, 50))
def test_mi_invariant_under_bin_preserving_relabel(seed, scale, offset):
    rng = np.random.default_rng(seed)
    # intensities at bin centers so affine relabeling cannot move a value across a boundary
    a = (rng.integers(0, 16, (24, 24)) + 0.5) / 16
    a[0, 0], a[0, 1] = 0.5 / 16, 15.5 / 16
    b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    assert mutual_information(a * scale + offset, b, 16) == pytest.approx(mutual_information(a, b, 16), abs=1e-12)


# -- MI alignment -------------------------------------------------------------


def test_align_recovers_shift():
    ref = structured(0)
    res = align_translation_mi(ref, shifted(ref, 3, -2), radius=16)
    assert (res.dx, res.dy) == (3, -2)
    assert res.confidence >= 1.0 and res.mi_score >= 0 and not res.low_confidence


def test_align_identity():
    ref = structured(1)
    res = align_translation_mi(ref, ref, radius=4)
    assert (res.dx, res.dy) == (0, 0)


def test_align_noise_flagged():
    rng = np.random.default_rng(2)
    res = align_translation_mi(rng.random((64, 64)), rng.random((64, 64)), radius=4, bins=8)
    assert res.low_confidence and (res.dx, res.dy) == (0, 0)


def test_align_radius_validated():
    with pytest.raises(ArgumentError):
        align_translation_mi(np.ones((10, 10)), np.ones((10, 10)), radius=0)


@settings(max_examples=15, deadline=None)
@given(dx=st.integers(-5, 5), dy=st.integers(-5, 5), seed=st.integers(0, 1000))
def test_align_property_small_radius(dx, dy, seed):
    ref = structured(seed, (64, 64))
    res = align_translation_mi(ref, shifted(ref, dx, dy), radius=5)
    assert (res.dx, res.dy) == (dx, dy)


def test_apply_alignment_updates_offsets():
    _, cam, _ = make_rig(0.0, 10.0)
    moved = apply_alignment(cam, AlignmentResult(3, -2, 1.0, 2.0))
    l0, s0 = cam.project(1.0, 2.0, 3.0)
    l1, s1 = moved.project(1.0, 2.0, 3.0)
    assert (l1 - l0, s1 - s0) == pytest.approx((-2.0, 3.0))
    assert apply_alignment(cam, AlignmentResult(0, 0, 0.1, 1.0, True)) is cam


# -- 3D translation -----------------------------------------------------------


def terrain(seed=0, shape=(60, 60)):
    rng = np.random.default_rng(seed)
    h = ndimage.gaussian_filter(rng.random(shape), 3) * 40
    h[20:30, 10:25] += 12.0
    return HeightField((100.0, 500.0), 1.0, h)


def offset(h: HeightField, di, dj, dz):
    """Reconstruction of the same surface moved by (di, dj) cells and dz meters."""
    return HeightField((h.origin[0] + di * h.cell_size, h.origin[1] + dj * h.cell_size), h.cell_size, h.heights + dz)


def test_translation_recovers_offset():
    truth = terrain()
    t = estimate_3d_translation(truth, offset(truth, 2, -1, 0.7))
    assert (t.tx, t.ty) == (2.0, -1.0)
    assert t.tz == pytest.approx(0.7, abs=1e-6)
    assert t.inlier_fraction == 1.0 and t.surface == "dsm"


def test_translation_identity():
    truth = terrain()
    t = estimate_3d_translation(truth, truth)
    assert (t.tx, t.ty, t.tz) == (0.0, 0.0, 0.0)


def test_translation_median_robust_to_outliers():
    truth = terrain()
    rng = np.random.default_rng(3)
    h = truth.heights + 0.7
    bad = rng.random(h.shape) < 0.4
    h[bad] += rng.choice([-10.0, 10.0], bad.sum())
    t = estimate_3d_translation(truth, HeightField(truth.origin, 1.0, h))
    assert abs(t.tz - 0.7) < 0.01
    assert 0.5 < t.inlier_fraction < 0.7


def test_translation_overlap_error():
    truth = terrain()
    far = HeightField((100.0 + 55.0, 500.0), 1.0, truth.heights)
    with pytest.raises(InsufficientOverlapError):
        estimate_3d_translation(truth, far)
    with pytest.raises(ArgumentError):
        estimate_3d_translation(truth, HeightField(truth.origin, 2.0, truth.heights))


@settings(max_examples=20, deadline=None)
@given(u=st.integers(-3, 3), v=st.integers(-3, 3), w=st.floats(-5, 5), seed=st.integers(0, 50))
def test_translation_equivariant(u, v, w, seed):
    truth = terrain(seed)
    base = offset(truth, 0, 0, 0.0)
    t0 = estimate_3d_translation(truth, base, xy_radius=4)
    t1 = estimate_3d_translation(truth, offset(base, u, v, w), xy_radius=4)
    assert (t1.tx - t0.tx, t1.ty - t0.ty) == (u, v)
    assert t1.tz - t0.tz == pytest.approx(w, abs=1e-9)


def test_translation_invariant_type():
    with pytest.raises(ArgumentError):
        Translation3D(0, 0, 0, 1.5)
