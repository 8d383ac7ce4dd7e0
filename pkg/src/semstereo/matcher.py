"""Dense pairwise stereo on rectified images.

Census/Hamming matching cost, semi-global aggregation with an optional
semantic prior, equiangular subpixel selection, left-right consistency and
edge-aware weighted-least-squares filtering (alternating 1-D global
smoothers).

Disparity convention: right column = left column + d.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from semstereo.classes import ClassCode
from semstereo.errors import ArgumentError, DataError
from semstereo.rasters import DisparityMap

logger = logging.getLogger(__name__)

DEFAULT_STABLE = (int(ClassCode.GROUND), int(ClassCode.BUILDING), int(ClassCode.WATER))


# ---------------------------------------------------------------------------
# census cost


def _window_shape(window) -> tuple[int, int]:
    if np.isscalar(window):
        window = (int(window), int(window))
    wh, ww = (int(v) for v in window)
    if wh % 2 == 0 or ww % 2 == 0 or wh < 1 or ww < 1:
        raise ArgumentError(f"census window must be odd-sized, got {window}")
    if wh > 9 or ww > 9:
        raise ArgumentError("census window must not exceed 9x9")
    return wh, ww


def census_bits(window) -> int:
    wh, ww = _window_shape(window)
    return wh * ww - 1


def census_transform(img: np.ndarray, window=5) -> np.ndarray:
    """Census descriptors packed into uint64 words, shape (rows, cols, words).

    Bit k (row-major over the window, center skipped) is 1 where the
    neighbor is >= the center. Borders replicate edge pixels; NaN reads as 0.
    """
    wh, ww = _window_shape(window)
    img = np.nan_to_num(np.asarray(img, dtype=np.float64), nan=0.0)
    rows, cols = img.shape
    # edge replication covers a window taller or wider than the image, not both
    if wh > rows and ww > cols:
        raise ArgumentError("census window larger than the image")
    ry, rx = wh // 2, ww // 2
    padded = np.pad(img, ((ry, ry), (rx, rx)), mode="edge")
    nbits = wh * ww - 1
    words = np.zeros((rows, cols, (nbits + 63) // 64), dtype=np.uint64)
    k = 0
    for dy in range(wh):
        for dx in range(ww):
            if dy == ry and dx == rx:
                continue
            bit = padded[dy : dy + rows, dx : dx + cols] >= img
            words[:, :, k // 64] |= bit.astype(np.uint64) << np.uint64(k % 64)
            k += 1
    return words


@dataclass(frozen=True, eq=False)
class CostVolume:
    """Per-pixel, per-disparity matching cost; axis 2 indexes d_min + k."""

    costs: np.ndarray
    d_min: int

    def __post_init__(self):
        c = np.asarray(self.costs)
        if c.ndim != 3:
            raise ArgumentError("cost volume must be 3-D (rows, cols, disparities)")
        if np.issubdtype(c.dtype, np.floating) and np.any(c < 0):
            raise ArgumentError("matching costs must be nonnegative")
        object.__setattr__(self, "costs", c)
        object.__setattr__(self, "d_min", int(self.d_min))

    @property
    def height(self) -> int:
        return self.costs.shape[0]

    @property
    def width(self) -> int:
        return self.costs.shape[1]

    @property
    def n_disp(self) -> int:
        return self.costs.shape[2]

    @property
    def d_max(self) -> int:
        return self.d_min + self.n_disp - 1

    @property
    def disparities(self) -> np.ndarray:
        return np.arange(self.d_min, self.d_max + 1)


def _check_range(d_min: int, d_max: int, width: int) -> None:
    if d_min > d_max:
        raise ArgumentError(f"empty disparity range [{d_min}, {d_max}]")
    if d_max - d_min + 1 > width:
        raise ArgumentError(f"disparity range [{d_min}, {d_max}] exceeds the image width {width}")


def census_cost_volume(left: np.ndarray, right: np.ndarray, window=5, d_min: int = 0, d_max: int = 16) -> CostVolume:
    """Hamming distance between left(x) and right(x + d) census descriptors.

    Cells whose right coordinate falls outside the image, or where either
    pixel is nodata, cost the full descriptor bit count.
    """
    left = np.asarray(left, float)
    right = np.asarray(right, float)
    if left.shape != right.shape or left.ndim != 2:
        raise ArgumentError("left and right images must be 2-D with equal shape")
    d_min, d_max = int(d_min), int(d_max)
    rows, cols = left.shape
    _check_range(d_min, d_max, cols)
    nbits = census_bits(window)
    cl = census_transform(left, window)
    cr = census_transform(right, window)
    okl = np.isfinite(left)
    okr = np.isfinite(right)
    n_disp = d_max - d_min + 1
    costs = np.full((rows, cols, n_disp), nbits, dtype=np.uint8)
    for k, d in enumerate(range(d_min, d_max + 1)):
        x0 = max(0, -d)
        x1 = min(cols, cols - d)
        if x1 <= x0:
            continue
        diff = np.bitwise_count(cl[:, x0:x1] ^ cr[:, x0 + d : x1 + d]).sum(axis=2, dtype=np.uint16)
        ok = okl[:, x0:x1] & okr[:, x0 + d : x1 + d]
        costs[:, x0:x1, k] = np.where(ok, diff, nbits).astype(np.uint8)
    return CostVolume(costs, d_min)


# ---------------------------------------------------------------------------
# semi-global aggregation


@dataclass(frozen=True)
class SgmParams:
    """Matcher parameters.

    Attributes:
        P1: penalty for +-1 disparity steps (cost units).
        P2: penalty for larger jumps before gradient attenuation.
        p2_gradient_scale: guide-gradient divisor attenuating P2 at edges.
        paths: number of aggregation directions, 4 or 8.
        lr_max_diff: left-right consistency tolerance in pixels.
        window: census window size.
        lr_check: run the right-reference match and invalidate inconsistent pixels.
        wls_lambda: WLS smoothness weight; 0 disables filtering.
        wls_sigma: WLS guide-edge scale (image intensity units).
        wls_iterations: WLS alternating sweeps.
        fill_invalid: in-fill pixels rejected by the consistency check from
            the WLS smoothness term instead of leaving them invalid.
    """

    P1: float = 4.0
    P2: float = 48.0
    p2_gradient_scale: float = 0.05
    paths: int = 8
    lr_max_diff: float = 1.0
    window: int = 5
    lr_check: bool = True
    wls_lambda: float = 2.0
    wls_sigma: float = 0.05
    wls_iterations: int = 3
    fill_invalid: bool = True

    def __post_init__(self):
        if not 0 < self.P1 < self.P2:
            raise ArgumentError("SGM penalties must satisfy 0 < P1 < P2")
        if self.paths not in (4, 8):
            raise ArgumentError("paths must be 4 or 8")
        if not self.p2_gradient_scale > 0:
            raise ArgumentError("p2_gradient_scale must be positive")
        if self.lr_max_diff < 0 or self.wls_lambda < 0 or not self.wls_sigma > 0:
            raise ArgumentError("invalid consistency or WLS parameters")
        _window_shape(self.window)


@dataclass(frozen=True)
class SemanticPriorParams:
    """Semantic modulation of the aggregation.

    ``beta_same`` scales P2 for steps that stay inside one class and
    ``beta_diff`` for steps that cross a class boundary of the left labels.
    ``gamma`` is added to the matching cost where the left pixel belongs to
    a stable class and the right pixel at the candidate disparity carries a
    different label. ``gamma=None`` means a quarter of the census bit count.
    (1, 1, 0) reproduces plain SGM exactly.
    """

    beta_same: float = 2.0
    beta_diff: float = 0.5
    gamma: float | None = None
    stable_classes: tuple[int, ...] = DEFAULT_STABLE

    def __post_init__(self):
        if self.beta_same < 1:
            raise ArgumentError("beta_same must be >= 1")
        if not 0 < self.beta_diff <= 1:
            raise ArgumentError("beta_diff must lie in (0, 1]")
        if self.gamma is not None and self.gamma < 0:
            raise ArgumentError("gamma must be >= 0")
        object.__setattr__(self, "stable_classes", tuple(int(c) for c in self.stable_classes))

    @classmethod
    def neutral(cls) -> "SemanticPriorParams":
        return cls(1.0, 1.0, 0.0)

    def gamma_for(self, window) -> float:
        return 0.25 * census_bits(window) if self.gamma is None else float(self.gamma)


# (drow, dcol) steps from predecessor to pixel
DIRECTIONS_4 = ((0, 1), (0, -1), (1, 0), (-1, 0))
DIRECTIONS_8 = DIRECTIONS_4 + ((1, 1), (1, -1), (-1, 1), (-1, -1))


def _oriented(a: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """View of ``a`` in which the path runs down the rows.

    Returns the view and the column shift of the predecessor.
    """
    if dr == 0:
        v = a.swapaxes(0, 1)
        return (v if dc > 0 else v[::-1]), 0
    v = a if dr > 0 else a[::-1]
    return v, dc


def _pair_change(g: np.ndarray, shift: int) -> np.ndarray:
    """|g(pixel) - g(predecessor)| for a downward path; row 0 and edges get 0."""
    out = np.zeros(g.shape, dtype=np.float64)
    if shift == 0:
        out[1:] = np.abs(g[1:] - g[:-1])
    elif shift > 0:
        out[1:, 1:] = np.abs(g[1:, 1:] - g[:-1, :-1])
    else:
        out[1:, :-1] = np.abs(g[1:, :-1] - g[:-1, 1:])
    return out


def _class_change(c: np.ndarray, shift: int) -> np.ndarray:
    out = np.zeros(c.shape, dtype=bool)
    if shift == 0:
        out[1:] = c[1:] != c[:-1]
    elif shift > 0:
        out[1:, 1:] = c[1:, 1:] != c[:-1, :-1]
    else:
        out[1:, :-1] = c[1:, :-1] != c[:-1, 1:]
    return out


def _aggregate_down(C: np.ndarray, P1: float, P2: np.ndarray, shift: int, acc: np.ndarray) -> None:
    """Accumulate one downward path's aggregated costs into ``acc``.

    ``P2[r, c]`` is the jump penalty for entering (r, c) from its
    predecessor (r - 1, c - shift).
    """
    rows, cols, _ = C.shape
    P1 = np.float32(P1)
    prev = C[0].astype(np.float32)
    acc[0] += prev
    shifted = np.empty_like(prev)
    for r in range(1, rows):
        if shift == 0:
            shifted[:] = prev
        elif shift > 0:
            shifted[1:] = prev[:-1]
            shifted[0] = 0.0
        else:
            shifted[:-1] = prev[1:]
            shifted[-1] = 0.0
        m = shifted.min(axis=1, keepdims=True)
        t = np.minimum(shifted, m + P2[r][:, None])
        np.minimum(t[:, 1:], shifted[:, :-1] + P1, out=t[:, 1:])
        np.minimum(t[:, :-1], shifted[:, 1:] + P1, out=t[:, :-1])
        t -= m
        t += C[r]
        acc[r] += t
        prev = t


def sgm_aggregate(
    cv: CostVolume,
    P1: float,
    P2: float,
    guide: np.ndarray | None = None,
    p2_gradient_scale: float = 0.05,
    paths: int = 8,
    directions=None,
    class_left: np.ndarray | None = None,
    prior: SemanticPriorParams | None = None,
) -> np.ndarray:
    """Sum of per-direction aggregated costs, float32 (rows, cols, disparities).

    Directions are processed in a fixed order so the summation is
    reproducible. ``directions`` overrides ``paths`` with explicit
    (drow, dcol) steps.
    """
    C = np.asarray(cv.costs, dtype=np.float32)
    rows, cols, _ = C.shape
    if directions is None:
        directions = DIRECTIONS_8 if paths == 8 else DIRECTIONS_4
    acc = np.zeros(C.shape, dtype=np.float32)
    for dr, dc in directions:
        Cv, shift = _oriented(C, dr, dc)
        Cv = np.ascontiguousarray(Cv)
        accv, _ = _oriented(acc, dr, dc)
        if guide is not None:
            gv, _ = _oriented(np.asarray(guide, float), dr, dc)
            grad = _pair_change(np.nan_to_num(gv), shift)
            P2v = P2 / np.maximum(1.0, grad / p2_gradient_scale)
        else:
            P2v = np.full(Cv.shape[:2], float(P2))
        if prior is not None and class_left is not None:
            cvw, _ = _oriented(np.asarray(class_left), dr, dc)
            cross = _class_change(cvw, shift)
            P2v = P2v * np.where(cross, prior.beta_diff, prior.beta_same)
        P2v = np.maximum(P2v, P1).astype(np.float32)
        _aggregate_down(Cv, P1, P2v, shift, accv)
    return acc


def _prior_unary(cv: CostVolume, class_left, class_right, prior: SemanticPriorParams, window) -> np.ndarray:
    gamma = prior.gamma_for(window)
    costs = cv.costs.astype(np.float32)
    if gamma == 0.0:
        return costs
    cl = np.asarray(class_left)
    cr = np.asarray(class_right)
    cols = cv.width
    stable = np.isin(cl, prior.stable_classes)
    for k, d in enumerate(cv.disparities):
        x0 = max(0, -d)
        x1 = min(cols, cols - d)
        if x1 <= x0:
            continue
        differ = stable[:, x0:x1] & (cl[:, x0:x1] != cr[:, x0 + d : x1 + d])
        costs[:, x0:x1, k] += np.float32(gamma) * differ
    return costs


# ---------------------------------------------------------------------------
# selection


def select_disparity(agg: np.ndarray, d_min: int, subpixel: bool = True) -> np.ndarray:
    """Winner-take-all over the aggregated volume with equiangular refinement.

    Ties resolve to the smallest disparity. The refinement offset is at most
    half a pixel and is skipped at the ends of the range.
    """
    k = np.argmin(agg, axis=2)
    d = k.astype(np.float64) + d_min
    if not subpixel:
        return d
    n = agg.shape[2]
    inner = (k > 0) & (k < n - 1)
    r, c = np.nonzero(inner)
    kk = k[r, c]
    c0 = agg[r, c, kk - 1].astype(np.float64)
    c1 = agg[r, c, kk].astype(np.float64)
    c2 = agg[r, c, kk + 1].astype(np.float64)
    denom = 2.0 * (np.maximum(c0, c2) - c1)
    offset = np.divide(c0 - c2, denom, out=np.zeros_like(denom), where=denom > 0)
    d[r, c] += np.clip(offset, -0.5, 0.5)
    return d


def lr_consistency(d_left: np.ndarray, d_right: np.ndarray, max_diff: float = 1.0) -> np.ndarray:
    """Mask of left pixels whose right-reference disparity agrees.

    The right map is indexed at round(x + dL) and must satisfy
    |dL + dR| <= max_diff.
    """
    rows, cols = d_left.shape
    xr = np.floor(np.arange(cols)[None, :] + d_left + 0.5)
    inside = np.isfinite(xr) & (xr >= 0) & (xr < cols)
    xi = np.where(inside, xr, 0).astype(np.int64)
    dR = d_right[np.arange(rows)[:, None], xi]
    return inside & (np.abs(d_left + dR) <= max_diff)


def _raw_match(left, right, d_min, d_max, params, class_left=None, class_right=None, prior=None):
    cv = census_cost_volume(left, right, params.window, d_min, d_max)
    if prior is not None:
        cv = CostVolume(_prior_unary(cv, class_left, class_right, prior, params.window), cv.d_min)
    agg = sgm_aggregate(
        cv,
        params.P1,
        params.P2,
        guide=left,
        p2_gradient_scale=params.p2_gradient_scale,
        paths=params.paths,
        class_left=class_left,
        prior=prior,
    )
    return select_disparity(agg, d_min)


def sgm_match(
    left: np.ndarray,
    right: np.ndarray,
    d_min: int,
    d_max: int,
    params: SgmParams | None = None,
    prior: SemanticPriorParams | None = None,
    class_left: np.ndarray | None = None,
    class_right: np.ndarray | None = None,
) -> DisparityMap:
    """Full matcher: census, SGM, subpixel, left-right check, WLS.

    With ``fill_invalid`` the WLS step in-fills pixels rejected by the
    consistency check, yielding a dense map; otherwise they stay NaN.
    """
    params = params or SgmParams()
    left = np.asarray(left, float)
    right = np.asarray(right, float)
    d_min, d_max = int(np.floor(d_min)), int(np.ceil(d_max))
    _check_range(d_min, d_max, left.shape[1])
    if prior is not None:
        if class_left is None or class_right is None:
            raise ArgumentError("the semantic prior needs class rasters for both images")
        if np.shape(class_left) != left.shape or np.shape(class_right) != left.shape:
            raise ArgumentError("class rasters must match the image dimensions")
    dL = _raw_match(left, right, d_min, d_max, params, class_left, class_right, prior)
    valid = np.isfinite(left)
    if params.lr_check:
        dR = _raw_match(right, left, -d_max, -d_min, params, class_right, class_left, prior)
        valid &= lr_consistency(dL, dR, params.lr_max_diff)
    disp = np.where(valid, dL, np.nan)
    out = DisparityMap(disp, float(d_min), float(d_max))
    if params.wls_lambda > 0:
        out = wls_filter(out, left, params.wls_lambda, params.wls_sigma, params.wls_iterations)
        if not params.fill_invalid:
            out = DisparityMap(np.where(valid, out.values, np.nan), out.d_min, out.d_max)
    v = np.clip(out.values, d_min, d_max)
    return DisparityMap(v, float(d_min), float(d_max))


# ---------------------------------------------------------------------------
# WLS filtering


def _solve_tridiagonal(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Batched Thomas algorithm along the last axis.

    ``lower[..., i]`` couples i to i-1 and ``upper[..., i]`` couples i to i+1.
    ``rhs`` may carry extra leading batch axes broadcast against the bands.
    """
    n = diag.shape[-1]
    cp = np.empty(np.broadcast_shapes(diag.shape, rhs.shape))
    dp = np.empty_like(cp)
    cp[..., 0] = upper[..., 0] / diag[..., 0]
    dp[..., 0] = rhs[..., 0] / diag[..., 0]
    for i in range(1, n):
        m = diag[..., i] - lower[..., i] * cp[..., i - 1]
        cp[..., i] = upper[..., i] / m
        dp[..., i] = (rhs[..., i] - lower[..., i] * dp[..., i - 1]) / m
    x = np.empty_like(dp)
    x[..., -1] = dp[..., -1]
    for i in range(n - 2, -1, -1):
        x[..., i] = dp[..., i] - cp[..., i] * x[..., i + 1]
    return x


def _smooth_rows(data: np.ndarray, guide: np.ndarray, lam: float, sigma: float) -> np.ndarray:
    """Solve (I + lam * L_w) u = f independently for every row."""
    w = np.exp(-np.abs(np.diff(guide, axis=-1)) / sigma)
    n = guide.shape[-1]
    lower = np.zeros(guide.shape)
    upper = np.zeros(guide.shape)
    lower[..., 1:] = -lam * w
    upper[..., :-1] = -lam * w
    diag = 1.0 - lower - upper
    return _solve_tridiagonal(lower, diag, upper, data)


def wls_filter(
    disp: DisparityMap,
    guide: np.ndarray,
    lam: float = 2.0,
    sigma_color: float = 0.05,
    iterations: int = 3,
) -> DisparityMap:
    """Edge-aware smoothing by alternating 1-D global smoothers.

    Invalid pixels get zero data weight: the valid-masked values and the
    mask itself are smoothed together and divided, which in-fills invalid
    pixels from their neighbors. Sweep ``t`` of ``T`` uses
    ``lam * 1.5 * 4**(T - t) / (4**T - 1)``.
    """
    if lam < 0:
        raise ArgumentError("lambda must be nonnegative")
    values = np.asarray(disp.values, float)
    guide = np.nan_to_num(np.asarray(guide, float), nan=0.0)
    if guide.shape != values.shape:
        raise ArgumentError("guide and disparity dimensions differ")
    valid = np.isfinite(values)
    if lam == 0 or not valid.any():
        return DisparityMap(values.copy(), disp.d_min, disp.d_max)
    stack = np.stack([np.where(valid, values, 0.0), valid.astype(float)])
    T = int(iterations)
    for t in range(1, T + 1):
        lam_t = lam * 1.5 * 4.0 ** (T - t) / (4.0**T - 1.0)
        stack = _smooth_rows(stack, guide, lam_t, sigma_color)
        stack = _smooth_rows(stack.swapaxes(1, 2), guide.T, lam_t, sigma_color).swapaxes(1, 2)
    num, den = stack
    out = np.divide(num, den, out=np.full_like(num, np.nan), where=den > 1e-8)
    out[valid & ~np.isfinite(out)] = values[valid & ~np.isfinite(out)]
    return DisparityMap(out, disp.d_min, disp.d_max)


# ---------------------------------------------------------------------------
# quality


def match_quality(disp: DisparityMap, truth: DisparityMap, thresh: float = 3.0) -> tuple[float, float]:
    """(EPE, D1) of a disparity map against truth."""
    from semstereo.metrics import disparity_metrics

    m = disparity_metrics(disp, truth, thresh)
    if m.n_evaluated == 0:
        raise DataError("nothing to score: no pixel is valid in both maps")
    return m.epe, m.d1
