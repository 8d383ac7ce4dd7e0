import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semstereo.errors import ArgumentError, DataError
from semstereo.matcher import (
    CostVolume,
    SemanticPriorParams,
    SgmParams,
    census_cost_volume,
    census_transform,
    lr_consistency,
    match_quality,
    select_disparity,
    sgm_aggregate,
    sgm_match,
    wls_filter,
)
from semstereo.rasters import DisparityMap

RAW = SgmParams(wls_lambda=0.0, lr_check=False)


# -- census ---------------------------------------------------------------------


def census_oracle(img, wh, ww):
    """Bit strings per pixel, edge replicated, row-major window order, center skipped."""
    rows, cols = img.shape
    ry, rx = wh // 2, ww // 2
    out = {}
    for r in range(rows):
        for c in range(cols):
            bits = []
            for dy in range(-ry, ry + 1):
                for dx in range(-rx, rx + 1):
                    if dy == 0 and dx == 0:
                        continue
                    rr = min(max(r + dy, 0), rows - 1)
                    cc = min(max(c + dx, 0), cols - 1)
                    bits.append(1 if img[rr, cc] >= img[r, c] else 0)
            out[r, c] = bits
    return out


def test_census_matches_bitwise_oracle():
    left = np.array([[3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0]])
    right = np.array([[2.0, 7.0, 1.0, 8.0, 2.0, 8.0, 1.0]])
    cv = census_cost_volume(left, right, window=3, d_min=-2, d_max=2)
    bl = census_oracle(left, 3, 3)
    br = census_oracle(right, 3, 3)
    words = census_transform(left, 3)
    for c in range(7):
        packed = int(words[0, c, 0])
        assert [(packed >> k) & 1 for k in range(8)] == bl[0, c]
    for c in range(7):
        for k, d in enumerate(range(-2, 3)):
            if 0 <= c + d < 7:
                expected = sum(a != b for a, b in zip(bl[0, c], br[0, c + d]))
            else:
                expected = 8
            assert cv.costs[0, c, k] == expected


def test_census_identical_images_zero_cost():
    img = np.random.default_rng(0).random((20, 30))
    cv = census_cost_volume(img, img, d_min=-3, d_max=3)
    assert (cv.costs[:, :, 3] == 0).all()


def test_census_constant_images():
    img = np.full((10, 12), 0.4)
    cv = census_cost_volume(img, img, d_min=-2, d_max=2)
    for k, d in enumerate(range(-2, 3)):
        x0, x1 = max(0, -d), min(12, 12 - d)
        assert (cv.costs[:, x0:x1, k] == 0).all()
        # border cells carry the full descriptor bit count
        assert (np.delete(cv.costs[:, :, k], np.s_[x0:x1], axis=1) == 24).all()


def test_census_errors():
    with pytest.raises(ArgumentError):
        census_cost_volume(np.ones((3, 3)), np.ones((3, 3)), window=5, d_min=0, d_max=1)
    with pytest.raises(ArgumentError):
        census_cost_volume(np.ones((9, 9)), np.ones((9, 9)), window=4)
    with pytest.raises(ArgumentError):
        census_cost_volume(np.ones((9, 30)), np.ones((9, 30)), window=11)
    with pytest.raises(ArgumentError):
        census_cost_volume(np.ones((9, 9)), np.ones((9, 9)), window=3, d_min=0, d_max=20)


# -- aggregation ----------------------------------------------------------------


def dp_oracle(C, P1, P2, reverse=False):
    """Normalized 1-D path recursion written out in plain loops."""
    n, D = C.shape
    order = range(n - 1, -1, -1) if reverse else range(n)
    L = np.zeros((n, D))
    prev = None
    for x in order:
        if prev is None:
            L[x] = C[x]
        else:
            m = min(L[prev])
            for d in range(D):
                cands = [L[prev, d], m + P2]
                if d > 0:
                    cands.append(L[prev, d - 1] + P1)
                if d < D - 1:
                    cands.append(L[prev, d + 1] + P1)
                L[x, d] = C[x, d] + min(cands) - m
        prev = x
    return L


def path_enumeration(C, P1, P2):
    """Minimum total cost over every disparity path ending at each (last x, d)."""
    n, D = C.shape
    best = np.full(D, np.inf)
    for path in itertools.product(range(D), repeat=n):
        cost = sum(C[x, path[x]] for x in range(n))
        for x in range(1, n):
            jump = abs(path[x] - path[x - 1])
            cost += 0 if jump == 0 else (P1 if jump == 1 else P2)
        best[path[-1]] = min(best[path[-1]], cost)
    return best


def test_dp_oracle_matches_path_enumeration():
    rng = np.random.default_rng(0)
    C = rng.integers(0, 20, (5, 4)).astype(float)
    L = dp_oracle(C, 3, 10)
    # the recursion subtracts the previous minimum at every step
    offset = 0.0
    for x in range(1, 5):
        offset += dp_oracle(C[:x], 3, 10)[-1].min()
    assert np.array_equal(L[-1] + offset, path_enumeration(C, 3, 10))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 40), D=st.integers(2, 12))
def test_two_path_sgm_equals_dp_oracle(seed, n, D):
    rng = np.random.default_rng(seed)
    C = rng.integers(0, 25, (1, n, D)).astype(np.uint8)
    agg = sgm_aggregate(CostVolume(C, 0), 3.0, 11.0, directions=((0, 1), (0, -1)))
    expected = dp_oracle(C[0].astype(float), 3, 11) + dp_oracle(C[0].astype(float), 3, 11, reverse=True)
    assert np.array_equal(agg[0].astype(float), expected)


def test_forced_minimum_recovered():
    rng = np.random.default_rng(1)
    truth = rng.integers(0, 10, (30, 40))
    C = np.full((30, 40, 10), 60, np.uint8)
    np.put_along_axis(C, truth[..., None], 0, axis=2)
    agg = sgm_aggregate(CostVolume(C, -4), 4.0, 48.0)
    assert np.array_equal(select_disparity(agg, -4, subpixel=False), truth - 4.0)


def random_dots(k, shape=(96, 128), seed=0):
    rng = np.random.default_rng(seed)
    left = rng.random(shape)
    right = np.roll(left, k, axis=1)  # right[x + k] = left[x]
    right[:, :k] = rng.random((shape[0], k)) if k > 0 else right[:, :k]
    return left, right


@pytest.mark.parametrize("k", [-5, 0, 7])
def test_random_dot_stereogram(k):
    left, right = random_dots(k)
    left_c, right_c = (left, right) if k >= 0 else random_dots(k)
    disp = sgm_match(left_c, right_c, -12, 12)
    interior = disp.values[4:-4, 16:-16]
    err = np.abs(interior - k)
    d1 = np.mean(~(err <= 3.0))
    assert d1 < 0.02


def test_neutral_prior_bit_identical():
    rng = np.random.default_rng(3)
    left, right = random_dots(4, (48, 64), seed=3)
    left = left + 0.2 * np.sin(np.arange(64) / 5)
    cl = rng.choice([2, 5, 6, 9], (48, 64)).astype(np.uint8)
    cr = rng.choice([2, 5, 6, 9], (48, 64)).astype(np.uint8)
    a = sgm_match(left, right, -8, 8)
    b = sgm_match(left, right, -8, 8, prior=SemanticPriorParams.neutral(), class_left=cl, class_right=cr)
    assert np.array_equal(a.values, b.values, equal_nan=True)


def test_prior_requires_matching_classes():
    img = np.random.default_rng(0).random((16, 16))
    with pytest.raises(ArgumentError):
        sgm_match(img, img, -2, 2, prior=SemanticPriorParams())
    with pytest.raises(ArgumentError):
        sgm_match(img, img, -2, 2, prior=SemanticPriorParams(), class_left=np.zeros((3, 3)), class_right=np.zeros((3, 3)))


def test_prior_default_gamma():
    assert SemanticPriorParams().gamma_for(5) == 6.0
    with pytest.raises(ArgumentError):
        SemanticPriorParams(beta_same=0.5)
    with pytest.raises(ArgumentError):
        SemanticPriorParams(beta_diff=0.0)


def test_monotone_smoothing_in_p2():
    rng = np.random.default_rng(4)
    base = np.clip(np.rint(8 + 3 * np.sin(np.arange(40) / 6.0)), 0, 15).astype(int)
    C = rng.integers(10, 40, (40, 40, 16)).astype(np.uint8)
    np.put_along_axis(C, np.broadcast_to(base[None, :, None], (40, 40, 1)), 0, axis=2)
    C = np.clip(C.astype(int) + rng.integers(0, 25, C.shape), 0, 255).astype(np.uint8)
    cv = CostVolume(C, 0)
    levels = []
    for P2 in (8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 1024.0):
        d = select_disparity(sgm_aggregate(cv, 4.0, P2), 0, subpixel=False)
        levels.append(np.unique(d).size)
    assert all(a >= b for a, b in zip(levels, levels[1:]))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_subpixel_within_half_pixel(seed):
    rng = np.random.default_rng(seed)
    agg = rng.random((8, 8, 7)).astype(np.float32)
    agg[rng.random((8, 8)) < 0.2, :] = 1.0  # flat plateaus
    integer = select_disparity(agg, -3, subpixel=False)
    refined = select_disparity(agg, -3)
    assert np.max(np.abs(refined - integer)) <= 0.5


def test_left_right_symmetry():
    left, right = random_dots(6, seed=5)
    params = SgmParams(wls_lambda=0.0)
    a = sgm_match(left, right, -2, 10, params)
    b = sgm_match(right, left, -10, 2, params)
    ok_a, ok_b = np.isfinite(a.values), np.isfinite(b.values)
    assert ok_a[:, 20:-20].mean() > 0.95 and ok_b[:, 20:-20].mean() > 0.95
    # swapped match is the negated map, sampled at the corresponding pixel
    cols = np.arange(left.shape[1])
    xr = np.clip(np.rint(cols[None, :] + np.nan_to_num(a.values)).astype(int), 0, left.shape[1] - 1)
    back = b.values[np.arange(left.shape[0])[:, None], xr]
    both = ok_a & np.isfinite(back)
    assert np.max(np.abs(a.values[both] + back[both])) <= 1.0


def test_lr_consistency_mask():
    dl = np.array([[1.0, 1.0, 0.0, -1.0]])
    dr = np.array([[0.0, -1.0, 5.0, 0.0]])
    assert lr_consistency(dl, dr).tolist() == [[True, False, False, False]]


def test_sgm_range_exceeding_width():
    img = np.ones((8, 8))
    with pytest.raises(ArgumentError):
        sgm_match(img, img, -5, 5)


def test_sgm_params_invariants():
    with pytest.raises(ArgumentError):
        SgmParams(P1=10, P2=5)
    with pytest.raises(ArgumentError):
        SgmParams(paths=6)


def test_output_respects_range():
    left, right = random_dots(3, (32, 64), seed=9)
    d = sgm_match(left, right, -4, 6)
    assert d.check_range() and (d.d_min, d.d_max) == (-4.0, 6.0)


def test_fill_invalid_switch():
    left, right = random_dots(5, (48, 96), seed=2)
    dense = sgm_match(left, right, -8, 8)
    sparse = sgm_match(left, right, -8, 8, SgmParams(fill_invalid=False))
    assert np.isnan(sparse.values).any()
    assert np.isfinite(dense.values).sum() > np.isfinite(sparse.values).sum()
    assert not (np.isfinite(sparse.values) & np.isnan(dense.values)).any()
    ok = np.isfinite(sparse.values)
    assert np.array_equal(sparse.values[ok], dense.values[ok])


# -- WLS ------------------------------------------------------------------------


def test_wls_lambda_zero_identity():
    v = np.random.default_rng(0).random((10, 12))
    v[2, 3] = np.nan
    d = DisparityMap(v, 0, 1)
    out = wls_filter(d, np.random.default_rng(1).random((10, 12)), lam=0.0)
    assert np.array_equal(out.values, v, equal_nan=True)


def test_wls_constant_unchanged():
    d = DisparityMap(np.full((16, 20), 3.25), 0, 5)
    out = wls_filter(d, np.random.default_rng(2).random((16, 20)), lam=8.0)
    assert np.allclose(out.values, 3.25, atol=1e-12)


def test_wls_two_plateaus():
    rng = np.random.default_rng(3)
    truth = np.where(np.arange(64)[None, :] < 32, 2.0, 9.0) * np.ones((48, 1))
    guide = np.where(truth < 5, 0.2, 0.8)
    noisy = truth + rng.normal(0, 0.5, truth.shape)
    out = wls_filter(DisparityMap(noisy, 0, 12), guide, lam=8.0, sigma_color=0.05).values
    for m in (truth == 2.0, truth == 9.0):
        assert np.var(out[m]) * 4 <= np.var(noisy[m])
        assert abs(out[m].mean() - noisy[m].mean()) < 0.05
        assert abs(out[m].mean() - truth[m].mean()) < 0.05


def test_wls_infills_invalid():
    v = np.full((10, 10), 4.0)
    v[4:6, 4:6] = np.nan
    out = wls_filter(DisparityMap(v, 0, 8), np.zeros((10, 10)), lam=2.0)
    assert np.allclose(out.values, 4.0)


# -- quality --------------------------------------------------------------------


def test_match_quality():
    t = DisparityMap(np.array([[1.0, 2.0], [3.0, np.nan]]), 0, 5)
    assert match_quality(t, t) == (0.0, 0.0)
    p = DisparityMap(np.array([[1.5, 6.0], [np.nan, 0.0]]), 0, 6)
    epe, d1 = match_quality(p, t)
    # errors 0.5 and 4.0 on joint pixels; the NaN prediction counts as an error in D1 only
    assert epe == pytest.approx(2.25)
    assert d1 == pytest.approx(2 / 3)
    with pytest.raises(DataError):
        match_quality(DisparityMap(np.full((2, 2), np.nan), 0, 0), t)
