"""Tile registration: mutual-information translation search and 3-D offset
estimation between height fields."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from semstereo.errors import ArgumentError, InsufficientOverlapError
from semstereo.geometry import RpcCamera
from semstereo.rasters import HeightField

logger = logging.getLogger(__name__)

MIN_JOINT_PIXELS = 100
LOW_CONFIDENCE = 1.01


def _bin_index(a: np.ndarray, valid: np.ndarray, bins: int) -> np.ndarray:
    """Uniform bin index over the valid range of ``a``; -1 where invalid."""
    out = np.full(a.shape, -1, dtype=np.int64)
    v = a[valid]
    if v.size == 0:
        return out
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
        out[valid] = np.clip(idx, 0, bins - 1)
    else:
        out[valid] = 0
    return out


def _entropy_bits(counts: np.ndarray, total: int) -> float:
    # sorted summation keeps the value independent of histogram layout
    p = np.sort(counts[counts > 0]) / total
    return float(-np.sum(p * np.log2(p)))


def _mi_from_indices(ia: np.ndarray, ib: np.ndarray, bins: int) -> float:
    n = ia.size
    joint = np.bincount(ia * bins + ib, minlength=bins * bins)
    ha = _entropy_bits(np.bincount(ia, minlength=bins), n)
    hb = _entropy_bits(np.bincount(ib, minlength=bins), n)
    hab = _entropy_bits(joint, n)
    return max(0.0, ha + hb - hab)


def mutual_information(a: np.ndarray, b: np.ndarray, bins: int = 64) -> float:
    """Mutual information of two rasters in bits, H(A) + H(B) - H(A, B).

    Each raster is binned uniformly over its own valid range. Pixels that
    are NaN in either raster are excluded.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ArgumentError("mutual information needs rasters of equal shape")
    if bins < 2:
        raise ArgumentError("bins must be at least 2")
    valid = np.isfinite(a) & np.isfinite(b)
    n = int(valid.sum())
    if n < MIN_JOINT_PIXELS:
        raise InsufficientOverlapError(f"only {n} jointly valid pixels (need {MIN_JOINT_PIXELS})")
    ia = _bin_index(a, valid, bins)[valid]
    ib = _bin_index(b, valid, bins)[valid]
    return _mi_from_indices(ia, ib, bins)


@dataclass(frozen=True)
class AlignmentResult:
    """Integer shift of ``moving`` relative to ``reference``.

    ``moving[r, c]`` corresponds to ``reference[r - dy, c - dx]``.
    """

    dx: int
    dy: int
    mi_score: float
    confidence: float
    low_confidence: bool = False


def _overlap(shape, dx: int, dy: int):
    rows, cols = shape
    mr = slice(max(0, dy), rows + min(0, dy))
    mc = slice(max(0, dx), cols + min(0, dx))
    rr = slice(max(0, -dy), rows + min(0, -dy))
    rc = slice(max(0, -dx), cols + min(0, -dx))
    return (rr, rc), (mr, mc)


def align_translation_mi(reference: np.ndarray, moving: np.ndarray, radius: int = 16, bins: int = 64) -> AlignmentResult:
    """Exhaustive integer search for the shift maximizing mutual information.

    Bins are fixed per raster over its full valid range. Confidence is the
    best score over the best score at least two pixels (Chebyshev) away from
    the winner. Below 1.01 the result is flagged and the shift reset to 0.
    """
    reference = np.asarray(reference, float)
    moving = np.asarray(moving, float)
    if reference.shape != moving.shape:
        raise ArgumentError("reference and moving rasters must share dimensions")
    radius = int(radius)
    if radius < 1:
        raise ArgumentError("search radius must be at least 1")
    va = np.isfinite(reference)
    vb = np.isfinite(moving)
    ia = _bin_index(reference, va, bins)
    ib = _bin_index(moving, vb, bins)
    n = 2 * radius + 1
    scores = np.full((n, n), -np.inf)
    for j, dy in enumerate(range(-radius, radius + 1)):
        for i, dx in enumerate(range(-radius, radius + 1)):
            (rr, rc), (mr, mc) = _overlap(reference.shape, dx, dy)
            a = ia[rr, rc]
            b = ib[mr, mc]
            ok = (a >= 0) & (b >= 0)
            if np.count_nonzero(ok) < MIN_JOINT_PIXELS:
                continue
            scores[j, i] = _mi_from_indices(a[ok], b[ok], bins)
    if not np.isfinite(scores).any():
        raise InsufficientOverlapError("no candidate shift has enough overlapping pixels")
    k = int(np.argmax(scores))
    bj, bi = divmod(k, n)
    best = float(scores[bj, bi])
    jj, ii = np.mgrid[0:n, 0:n]
    far = np.maximum(np.abs(jj - bj), np.abs(ii - bi)) > 1
    second = float(scores[far].max()) if far.any() else -np.inf
    if second > 0:
        confidence = best / second
    else:
        confidence = math.inf if best > 0 else 1.0
    dx, dy = bi - radius, bj - radius
    if confidence < LOW_CONFIDENCE:
        logger.info("MI alignment plateau (confidence %.4f); keeping zero shift", confidence)
        return AlignmentResult(0, 0, best, confidence, True)
    return AlignmentResult(int(dx), int(dy), best, confidence, False)


def apply_alignment(cam: RpcCamera, result: AlignmentResult) -> RpcCamera:
    """Copy of ``cam`` whose line/sample offsets absorb the found shift."""
    if result.low_confidence:
        return cam
    return cam.with_adjustment(float(result.dy), float(result.dx))


@dataclass(frozen=True)
class Translation3D:
    """Offset of a reconstruction relative to truth: recon = truth moved by (tx, ty, tz)."""

    tx: float
    ty: float
    tz: float
    inlier_fraction: float
    spread: float = 0.0
    surface: str = "dsm"

    def __post_init__(self):
        if not 0.0 <= self.inlier_fraction <= 1.0:
            raise ArgumentError("inlier_fraction must lie in [0, 1]")


def _extent(h: HeightField):
    x0, y1 = h.origin
    return x0, x0 + h.cols * h.cell_size, y1 - h.rows * h.cell_size, y1


def estimate_3d_translation(
    truth_dsm: HeightField,
    recon_dsm: HeightField,
    xy_radius: int = 3,
    min_overlap: float = 0.25,
    inlier_tol: float = 1.0,
) -> Translation3D:
    """Integer-cell XY search plus median Z offset between two surfaces.

    For each candidate XY shift the height residuals recon - truth are
    formed over jointly valid cells; the shift whose residuals have the
    smallest median absolute deviation about their median wins (ties go to
    the smaller shift, then to the earlier candidate in row-major order).
    ``tz`` is the median residual there.
    """
    if abs(truth_dsm.cell_size - recon_dsm.cell_size) > 1e-9:
        raise ArgumentError("height fields must share a cell size")
    cell = truth_dsm.cell_size
    tx0, tx1, ty0, ty1 = _extent(truth_dsm)
    rx0, rx1, ry0, ry1 = _extent(recon_dsm)
    inter = max(0.0, min(tx1, rx1) - max(tx0, rx0)) * max(0.0, min(ty1, ry1) - max(ty0, ry0))
    for name, (a0, a1, b0, b1) in (("truth", (tx0, tx1, ty0, ty1)), ("recon", (rx0, rx1, ry0, ry1))):
        area = (a1 - a0) * (b1 - b0)
        if inter < min_overlap * area:
            raise InsufficientOverlapError(f"grids overlap on {inter / area:.1%} of the {name} grid")
    x, y = truth_dsm.cell_centers()
    tv = truth_dsm.valid
    xs, ys, zt = x[tv], y[tv], truth_dsm.heights[tv]
    best = None
    for j in range(-xy_radius, xy_radius + 1):
        for i in range(-xy_radius, xy_radius + 1):
            tx, ty = i * cell, j * cell
            zr = recon_dsm.sample_nearest(xs + tx, ys + ty)
            ok = np.isfinite(zr)
            if np.count_nonzero(ok) < max(MIN_JOINT_PIXELS, min_overlap * zt.size):
                continue
            res = zr[ok] - zt[ok]
            med = float(np.median(res))
            spread = float(np.median(np.abs(res - med)))
            key = (spread, i * i + j * j)
            if best is None or key < best[0]:
                best = (key, tx, ty, med, res)
    if best is None:
        raise InsufficientOverlapError("no candidate shift leaves enough jointly valid cells")
    (spread, _), tx, ty, tz, res = best
    inliers = float(np.mean(np.abs(res - tz) < inlier_tol))
    return Translation3D(float(tx), float(ty), tz, inliers, spread)
