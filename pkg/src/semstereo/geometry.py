"""RPC camera model, projective approximation and triangulation.

World coordinates are a generic (x, y, z) frame: x and y in planimetric
world units, z in meters. Image coordinates are (line, samp) = (row, column)
in pixels. RPC polynomials use the standard 20-term cubic ordering over the
normalized variables (P=y, L=x, H=z).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from semstereo.errors import (
    ApproximationError,
    ArgumentError,
    ConvergenceError,
    DataError,
    DegeneracyError,
    OutOfBoundsError,
    PoleError,
)

logger = logging.getLogger(__name__)

POLE_EPS = 1e-12
DEFAULT_VALIDITY = 1.2

# (exponent of L, exponent of P, exponent of H) for each of the 20 terms
RPC_TERM_EXPONENTS = (
    (0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (1, 0, 1), (0, 1, 1),
    (2, 0, 0), (0, 2, 0), (0, 0, 2),
    (1, 1, 1),
    (3, 0, 0), (1, 2, 0), (1, 0, 2), (2, 1, 0),
    (0, 3, 0), (0, 1, 2), (2, 0, 1), (0, 2, 1), (0, 0, 3),
)  # fmt: skip


class OutsideValidityWarning(UserWarning):
    """Point lies outside the RPC validity box but within twice its extent."""


class WorldPoint(NamedTuple):
    x: float
    y: float
    z: float


class ImagePoint(NamedTuple):
    line: float
    samp: float


@dataclass(frozen=True)
class WorldBox:
    xmin: float
    xmax: float
    ymin: float
    ymax: float
    zmin: float
    zmax: float

    def grid(self, nx: int, ny: int, nz: int) -> np.ndarray:
        """Regular (nz, ny, nx, 3) grid of world points, row-major with x fastest."""
        xs = np.linspace(self.xmin, self.xmax, nx)
        ys = np.linspace(self.ymin, self.ymax, ny)
        zs = np.linspace(self.zmin, self.zmax, nz)
        z, y, x = np.meshgrid(zs, ys, xs, indexing="ij")
        return np.stack([x, y, z], axis=-1)

    @property
    def center(self) -> WorldPoint:
        return WorldPoint(
            0.5 * (self.xmin + self.xmax),
            0.5 * (self.ymin + self.ymax),
            0.5 * (self.zmin + self.zmax),
        )


def rpc_terms(P, L, H) -> np.ndarray:
    """Stack the 20 cubic monomials in RPC order; output shape (20, *broadcast)."""
    P, L, H = np.broadcast_arrays(np.asarray(P, float), np.asarray(L, float), np.asarray(H, float))
    one = np.ones_like(P)
    return np.stack(
        [
            one, L, P, H,
            L * P, L * H, P * H,
            L * L, P * P, H * H,
            P * L * H,
            L * L * L, L * P * P, L * H * H, L * L * P,
            P * P * P, P * H * H, L * L * H, P * P * H, H * H * H,
        ]
    )  # fmt: skip


def _as_coeffs(values) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if arr.shape != (20,):
        raise ArgumentError(f"RPC polynomial needs 20 coefficients, got {arr.size}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class RpcCamera:
    """80-coefficient rational polynomial sensor model.

    ``adj_line``/``adj_samp`` are additive pixel offsets applied after
    denormalization (tile-to-reference alignment updates these).
    """

    line_num: np.ndarray
    line_den: np.ndarray
    samp_num: np.ndarray
    samp_den: np.ndarray
    x_off: float
    x_scale: float
    y_off: float
    y_scale: float
    h_off: float
    h_scale: float
    line_off: float
    line_scale: float
    samp_off: float
    samp_scale: float
    adj_line: float = 0.0
    adj_samp: float = 0.0
    crs_tag: str = "local"
    validity_bounds: float = DEFAULT_VALIDITY

    def __post_init__(self):
        for name in ("line_num", "line_den", "samp_num", "samp_den"):
            object.__setattr__(self, name, _as_coeffs(getattr(self, name)))
        for name in ("x_scale", "y_scale", "h_scale", "line_scale", "samp_scale"):
            if getattr(self, name) == 0:
                raise ArgumentError(f"RPC {name} must be nonzero")
        if self.line_den[0] != 1.0 or self.samp_den[0] != 1.0:
            raise ArgumentError("RPC denominators must have constant term exactly 1")
        if self.validity_bounds <= 0:
            raise ArgumentError("validity_bounds must be positive")

    # -- normalization ---------------------------------------------------
    def normalize_world(self, x, y, z):
        """World coordinates to normalized (P, L, H)."""
        return (
            (np.asarray(y, float) - self.y_off) / self.y_scale,
            (np.asarray(x, float) - self.x_off) / self.x_scale,
            (np.asarray(z, float) - self.h_off) / self.h_scale,
        )

    def normalize_image(self, line, samp):
        return (
            (np.asarray(line, float) - self.adj_line - self.line_off) / self.line_scale,
            (np.asarray(samp, float) - self.adj_samp - self.samp_off) / self.samp_scale,
        )

    def rational(self, P, L, H):
        """Normalized (line, samp) from normalized (P, L, H); raises on poles."""
        P, L, H = np.broadcast_arrays(np.asarray(P, float), np.asarray(L, float), np.asarray(H, float))
        polys = (self.line_num, self.line_den, self.samp_num, self.samp_den)
        acc = [np.full(P.shape, c[0]) for c in polys]
        powers = {
            "L": (None, L, L * L, L * L * L),
            "P": (None, P, P * P, P * P * P),
            "H": (None, H, H * H, H * H * H),
        }
        for k, (el, ep, eh) in enumerate(RPC_TERM_EXPONENTS[1:], start=1):
            term = None
            for var, e in (("L", el), ("P", ep), ("H", eh)):
                if e:
                    term = powers[var][e] if term is None else term * powers[var][e]
            for a, c in zip(acc, polys):
                if c[k] != 0.0:
                    a += c[k] * term
        ln, ld, sn, sd = acc
        if np.any(np.abs(ld) < POLE_EPS) or np.any(np.abs(sd) < POLE_EPS):
            raise PoleError("RPC denominator vanishes at the evaluation point")
        return ln / ld, sn / sd

    def project(self, x, y, z, check: bool = True):
        """Vectorized projection of world coordinates to (line, samp).

        With ``check`` set, non-finite input raises ArgumentError, points
        beyond twice the validity box raise OutOfBoundsError and points
        between one and two times the box emit OutsideValidityWarning.
        """
        P, L, H = self.normalize_world(x, y, z)
        if check:
            if not (np.all(np.isfinite(P)) and np.all(np.isfinite(L)) and np.all(np.isfinite(H))):
                raise ArgumentError("non-finite world coordinates")
            self._check_bounds(P, L, H)
        ln, sn = self.rational(P, L, H)
        line = ln * self.line_scale + self.line_off + self.adj_line
        samp = sn * self.samp_scale + self.samp_off + self.adj_samp
        return line, samp

    def _check_bounds(self, *normalized):
        worst = max(float(np.max(np.abs(v))) if np.size(v) else 0.0 for v in normalized)
        if worst > 2 * self.validity_bounds:
            raise OutOfBoundsError(
                f"normalized coordinate {worst:.3f} beyond 2x validity bounds "
                f"({2 * self.validity_bounds})"
            )
        if worst > self.validity_bounds:
            warnings.warn(
                f"normalized coordinate {worst:.3f} outside validity bounds",
                OutsideValidityWarning,
                stacklevel=3,
            )

    def check_poles(self, samples: int = 9) -> float:
        """Minimum denominator magnitude over a grid spanning the validity box.

        Raises PoleError when either denominator changes sign or drops to
        1e-6 or below inside the box.
        """
        v = np.linspace(-self.validity_bounds, self.validity_bounds, samples)
        P, L, H = np.meshgrid(v, v, v, indexing="ij")
        t = rpc_terms(P, L, H)
        worst = np.inf
        for den in (self.line_den, self.samp_den):
            values = np.tensordot(den, t, axes=1)
            if values.min() <= 0 < values.max() or values.max() < 0 <= values.min():
                raise PoleError("RPC denominator changes sign inside the validity volume")
            worst = min(worst, float(np.abs(values).min()))
        if worst <= 1e-6:
            raise PoleError(f"RPC denominator magnitude {worst:.3g} inside the validity volume")
        return worst

    def with_adjustment(self, d_line: float, d_samp: float) -> "RpcCamera":
        """Copy with the alignment offsets incremented."""
        return replace(self, adj_line=self.adj_line + d_line, adj_samp=self.adj_samp + d_samp)

    # -- text interchange ------------------------------------------------
    def to_text(self) -> str:
        keys = [
            ("LINE_OFF", self.line_off),
            ("SAMP_OFF", self.samp_off),
            ("LAT_OFF", self.y_off),
            ("LONG_OFF", self.x_off),
            ("HEIGHT_OFF", self.h_off),
            ("LINE_SCALE", self.line_scale),
            ("SAMP_SCALE", self.samp_scale),
            ("LAT_SCALE", self.y_scale),
            ("LONG_SCALE", self.x_scale),
            ("HEIGHT_SCALE", self.h_scale),
        ]
        lines = [f"{k}: {float(v)!r}" for k, v in keys]
        for prefix, coeffs in (
            ("LINE_NUM_COEFF", self.line_num),
            ("LINE_DEN_COEFF", self.line_den),
            ("SAMP_NUM_COEFF", self.samp_num),
            ("SAMP_DEN_COEFF", self.samp_den),
        ):
            lines.extend(f"{prefix}_{i + 1}: {float(c)!r}" for i, c in enumerate(coeffs))
        lines.append(f"ADJ_LINE: {float(self.adj_line)!r}")
        lines.append(f"ADJ_SAMP: {float(self.adj_samp)!r}")
        lines.append(f"CRS_TAG: {self.crs_tag}")
        lines.append(f"VALIDITY_BOUNDS: {float(self.validity_bounds)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RpcCamera":
        values: dict[str, str] = {}
        for raw in text.splitlines():
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            key, sep, value = raw.partition(":")
            if not sep:
                key, _, value = raw.partition(" ")
            values[key.strip().upper()] = value.strip()

        def num(key, default=None):
            if key not in values:
                if default is None:
                    raise DataError(f"RPC text is missing {key}")
                return default
            return float(values[key].split()[0])

        def poly(prefix):
            return [num(f"{prefix}_{i}") for i in range(1, 21)]

        return cls(
            line_num=poly("LINE_NUM_COEFF"),
            line_den=poly("LINE_DEN_COEFF"),
            samp_num=poly("SAMP_NUM_COEFF"),
            samp_den=poly("SAMP_DEN_COEFF"),
            x_off=num("LONG_OFF"),
            x_scale=num("LONG_SCALE"),
            y_off=num("LAT_OFF"),
            y_scale=num("LAT_SCALE"),
            h_off=num("HEIGHT_OFF"),
            h_scale=num("HEIGHT_SCALE"),
            line_off=num("LINE_OFF"),
            line_scale=num("LINE_SCALE"),
            samp_off=num("SAMP_OFF"),
            samp_scale=num("SAMP_SCALE"),
            adj_line=num("ADJ_LINE", 0.0),
            adj_samp=num("ADJ_SAMP", 0.0),
            crs_tag=values.get("CRS_TAG", "local"),
            validity_bounds=num("VALIDITY_BOUNDS", DEFAULT_VALIDITY),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RpcCamera":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def rpc_project(cam: RpcCamera, p: WorldPoint) -> ImagePoint:
    """Project a single world point through the RPC model."""
    x, y, z = (float(v) for v in p)
    line, samp = cam.project(x, y, z)
    return ImagePoint(float(line), float(samp))


def ground_intersect_arrays(
    cam: RpcCamera,
    line,
    samp,
    h,
    max_iter: int = 50,
    tol: float = 1e-10,
    fd_step: float = 1e-6,
):
    """Vectorized localization of image points on horizontal planes.

    Damped Newton iteration on the normalized (L, P) ground coordinates with
    a central finite-difference Jacobian.

    Returns:
        x, y: world coordinates (NaN where the iteration failed).
        residual: final max normalized image residual per point.
        status: 0 converged, 1 not converged, 2 singular Jacobian,
            3 outside twice the validity box.
    """
    line, samp, h = np.broadcast_arrays(
        np.asarray(line, float), np.asarray(samp, float), np.asarray(h, float)
    )
    shape = line.shape
    tl, ts = cam.normalize_image(line.ravel(), samp.ravel())
    H = ((h.ravel() - cam.h_off) / cam.h_scale).astype(float)
    n = tl.size
    L = np.zeros(n)
    P = np.zeros(n)
    status = np.ones(n, dtype=np.int8)
    residual = np.full(n, np.inf)
    active = np.ones(n, dtype=bool)
    limit = 2 * cam.validity_bounds

    def resid(Pv, Lv, Hv, tlv, tsv):
        fl, fs = cam.rational(Pv, Lv, Hv)
        return fl - tlv, fs - tsv

    for _ in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Pa, La, Ha = P[idx], L[idx], H[idx]
        rl, rs = resid(Pa, La, Ha, tl[idx], ts[idx])
        err = np.maximum(np.abs(rl), np.abs(rs))
        residual[idx] = err
        done = err < tol
        status[idx[done]] = 0
        active[idx[done]] = False
        keep = ~done
        idx, Pa, La, Ha, rl, rs, err = (a[keep] for a in (idx, Pa, La, Ha, rl, rs, err))
        if idx.size == 0:
            break
        # Jacobian columns: d/dL and d/dP
        fl_lp, fs_lp = cam.rational(Pa, La + fd_step, Ha)
        fl_lm, fs_lm = cam.rational(Pa, La - fd_step, Ha)
        fl_pp, fs_pp = cam.rational(Pa + fd_step, La, Ha)
        fl_pm, fs_pm = cam.rational(Pa - fd_step, La, Ha)
        a = (fl_lp - fl_lm) / (2 * fd_step)
        b = (fl_pp - fl_pm) / (2 * fd_step)
        c = (fs_lp - fs_lm) / (2 * fd_step)
        d = (fs_pp - fs_pm) / (2 * fd_step)
        det = a * d - b * c
        scale = np.maximum(np.abs(a * d), np.abs(b * c))
        singular = ~(np.abs(det) > 1e-12 * np.maximum(scale, 1e-300))
        if np.any(singular):
            status[idx[singular]] = 2
            active[idx[singular]] = False
            ok = ~singular
            idx, Pa, La, Ha, rl, rs, err, a, b, c, d, det = (
                v[ok] for v in (idx, Pa, La, Ha, rl, rs, err, a, b, c, d, det)
            )
        dL = -(d * rl - b * rs) / det
        dP = -(-c * rl + a * rs) / det
        # damping: halve the step until the residual does not grow
        step = np.ones_like(dL)
        for _ in range(12):
            nl, ns = resid(Pa + step * dP, La + step * dL, Ha, tl[idx], ts[idx])
            new_err = np.maximum(np.abs(nl), np.abs(ns))
            bad = ~(new_err <= err) & (step > 1e-3)
            if not np.any(bad):
                break
            step[bad] *= 0.5
        L[idx] = La + step * dL
        P[idx] = Pa + step * dP
        out = (np.abs(L[idx]) > limit) | (np.abs(P[idx]) > limit)
        if np.any(out):
            status[idx[out]] = 3
            active[idx[out]] = False

    x = L * cam.x_scale + cam.x_off
    y = P * cam.y_scale + cam.y_off
    failed = status != 0
    x[failed] = np.nan
    y[failed] = np.nan
    return x.reshape(shape), y.reshape(shape), residual.reshape(shape), status.reshape(shape)


def rpc_ground_intersect(cam: RpcCamera, ip: ImagePoint, h: float) -> WorldPoint:
    """Locate the world point at height ``h`` that projects to ``ip``."""
    line, samp = float(ip[0]), float(ip[1])
    if not (math.isfinite(line) and math.isfinite(samp) and math.isfinite(h)):
        raise ArgumentError("non-finite image point or height")
    Hn = (h - cam.h_off) / cam.h_scale
    if abs(Hn) > 2 * cam.validity_bounds:
        raise OutOfBoundsError(f"height {h} outside the RPC height validity range")
    x, y, res, status = ground_intersect_arrays(cam, line, samp, h)
    status = int(status)
    if status == 2:
        raise DegeneracyError("singular Jacobian while inverting the RPC model")
    if status == 3:
        raise OutOfBoundsError(f"image point {ip} maps beyond 2x the RPC validity bounds")
    if status == 1:
        raise ConvergenceError(
            f"RPC inversion did not converge (residual {float(res):.3g})", float(res)
        )
    return WorldPoint(float(x), float(y), float(h))


# ---------------------------------------------------------------------------
# projective approximation


@dataclass(frozen=True, eq=False)
class ProjectiveCamera:
    """3x4 homogeneous projection: ``M @ [x, y, z, 1] ~ [samp, line, 1]``.

    The matrix is stored with unit Frobenius norm and a positive last entry
    of the third row (when nonzero).
    """

    matrix: np.ndarray
    fitted_residual_px: float = 0.0
    degenerate: bool = field(default=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float).reshape(3, 4)
        if not np.all(np.isfinite(m)):
            raise ArgumentError("projection matrix must be finite")
        norm = np.linalg.norm(m)
        if norm == 0:
            raise ArgumentError("projection matrix is zero")
        m = m / norm
        if m[2, 3] < 0:
            m = -m
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        if np.linalg.matrix_rank(m[:, :3], tol=1e-12) < 3:
            object.__setattr__(self, "degenerate", True)

    def project(self, x, y, z):
        """Vectorized projection returning (line, samp)."""
        x, y, z = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(z, float))
        m = self.matrix
        u = m[0, 0] * x + m[0, 1] * y + m[0, 2] * z + m[0, 3]
        v = m[1, 0] * x + m[1, 1] * y + m[1, 2] * z + m[1, 3]
        w = m[2, 0] * x + m[2, 1] * y + m[2, 2] * z + m[2, 3]
        return v / w, u / w

    def center(self) -> np.ndarray:
        """Homogeneous camera center (right null vector of the matrix)."""
        _, _, vt = np.linalg.svd(self.matrix)
        return vt[-1]


def _normalizing_transform(points: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with RMS distance sqrt(dim)."""
    dim = points.shape[1]
    center = points.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((points - center) ** 2, axis=1)))
    s = math.sqrt(dim) / rms if rms > 0 else 1.0
    T = np.eye(dim + 1)
    T[:dim, :dim] *= s
    T[:dim, dim] = -s * center
    return T


def dlt_projection(world: np.ndarray, image_ls: np.ndarray) -> np.ndarray:
    """Direct linear transform for a 3x4 matrix from (N,3) world and (N,2) (line, samp)."""
    world = np.asarray(world, float)
    uv = np.asarray(image_ls, float)[:, ::-1]
    centered = world - world.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, np.abs(centered).max())) < 3:
        raise DegeneracyError("world samples are coplanar; projection fit is rank deficient")
    Tw = _normalizing_transform(world)
    Ti = _normalizing_transform(uv)
    Xn = (Tw @ np.c_[world, np.ones(len(world))].T).T
    un = (Ti @ np.c_[uv, np.ones(len(uv))].T).T
    n = len(world)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xn
    A[0::2, 8:12] = -un[:, 0:1] * Xn
    A[1::2, 4:8] = Xn
    A[1::2, 8:12] = -un[:, 1:2] * Xn
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    if s[-2] <= 1e-12 * s[0]:
        raise DegeneracyError("projection fit is rank deficient")
    Pn = vt[-1].reshape(3, 4)
    return np.linalg.solve(Ti, Pn) @ Tw


def fit_projection_matrix(
    cam: RpcCamera,
    bounds: WorldBox,
    grid: tuple[int, int, int] = (10, 10, 10),
    max_residual_px: float | None = None,
) -> ProjectiveCamera:
    """Approximate an RPC camera by a 3x4 projection over a world box.

    The fit samples ``grid`` nodes; the recorded residual is the max
    reprojection error over a verification grid of twice the density.
    """
    nx, ny, nz = (int(v) for v in grid)
    if min(nx, ny, nz) < 1 or nx * ny * nz < 6:
        raise ArgumentError(f"fit grid {grid} needs at least 6 nodes")
    if nz < 2 or bounds.zmax == bounds.zmin:
        raise DegeneracyError("fit grid needs at least two distinct heights (coplanar grid)")
    pts = bounds.grid(nx, ny, nz).reshape(-1, 3)
    line, samp = cam.project(pts[:, 0], pts[:, 1], pts[:, 2])
    M = dlt_projection(pts, np.c_[line, samp])
    proj = ProjectiveCamera(M)

    check = bounds.grid(2 * nx, 2 * ny, 2 * nz).reshape(-1, 3)
    cl, cs = cam.project(check[:, 0], check[:, 1], check[:, 2])
    pl, ps = proj.project(check[:, 0], check[:, 1], check[:, 2])
    residual = float(np.max(np.hypot(cl - pl, cs - ps)))
    logger.debug("projection fit residual %.3g px over %d check points", residual, len(check))
    if max_residual_px is not None and residual > max_residual_px:
        raise ApproximationError(
            f"projection approximation residual {residual:.4f} px exceeds {max_residual_px} px",
            residual,
        )
    return ProjectiveCamera(M, fitted_residual_px=residual)


# ---------------------------------------------------------------------------
# triangulation

MIN_TRIANGULATION_ANGLE_DEG = 0.05


def _ray_directions(cam: ProjectiveCamera, X: np.ndarray) -> np.ndarray:
    """Unit directions from world points toward the camera center (handles centers at infinity)."""
    C = cam.center()
    d = C[None, :3] - C[3] * X
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d


def triangulate_arrays(
    camL: ProjectiveCamera,
    camR: ProjectiveCamera,
    lineL,
    sampL,
    lineR,
    sampR,
    min_angle_deg: float = MIN_TRIANGULATION_ANGLE_DEG,
):
    """Vectorized linear triangulation.

    Returns:
        X: (N, 3) world points.
        residual: (N,) max reprojection error in pixels over both images.
        ok: (N,) False where the intersection angle is below ``min_angle_deg``.
    """
    if np.allclose(camL.matrix, camR.matrix, rtol=0, atol=1e-14):
        raise DegeneracyError("cannot triangulate with identical cameras")
    lineL, sampL, lineR, sampR = (np.asarray(v, float).ravel() for v in (lineL, sampL, lineR, sampR))
    PL, PR = camL.matrix, camR.matrix
    A = np.empty((lineL.size, 4, 4))
    A[:, 0] = sampL[:, None] * PL[2] - PL[0]
    A[:, 1] = lineL[:, None] * PL[2] - PL[1]
    A[:, 2] = sampR[:, None] * PR[2] - PR[0]
    A[:, 3] = lineR[:, None] * PR[2] - PR[1]
    # column equilibration keeps the SVD well conditioned for large world offsets
    col = np.linalg.norm(A, axis=1, keepdims=True)
    col[col == 0] = 1.0
    _, _, vt = np.linalg.svd(A / col)
    Xh = vt[:, -1, :] / col[:, 0, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        X = Xh[:, :3] / Xh[:, 3:4]
    finite = np.all(np.isfinite(X), axis=1)
    X[~finite] = np.nan
    pl, ps = camL.project(X[:, 0], X[:, 1], X[:, 2])
    ql, qs = camR.project(X[:, 0], X[:, 1], X[:, 2])
    residual = np.maximum(np.hypot(pl - lineL, ps - sampL), np.hypot(ql - lineR, qs - sampR))
    dl = _ray_directions(camL, np.nan_to_num(X))
    dr = _ray_directions(camR, np.nan_to_num(X))
    cosang = np.clip(np.abs(np.sum(dl * dr, axis=1)), 0.0, 1.0)
    angle = np.degrees(np.arccos(cosang))
    ok = finite & (angle >= min_angle_deg)
    return X, residual, ok


def triangulate(
    camL: ProjectiveCamera, camR: ProjectiveCamera, ipL: ImagePoint, ipR: ImagePoint
) -> tuple[WorldPoint, float]:
    """Linear (DLT) triangulation of one correspondence."""
    vals = [float(v) for v in (*ipL, *ipR)]
    if not all(math.isfinite(v) for v in vals):
        raise ArgumentError("non-finite image point")
    X, res, ok = triangulate_arrays(camL, camR, vals[0], vals[1], vals[2], vals[3])
    if not ok[0]:
        raise DegeneracyError("rays are near parallel (intersection angle below 0.05 deg)")
    return WorldPoint(*(float(v) for v in X[0])), float(res[0])


def view_direction(cam: RpcCamera, p: WorldPoint, delta: float = 50.0) -> np.ndarray:
    """Unit world direction of the viewing ray through the image of ``p``, pointing up."""
    ip = rpc_project(cam, p)
    lo = rpc_ground_intersect(cam, ip, p.z - delta)
    hi = rpc_ground_intersect(cam, ip, p.z + delta)
    d = np.subtract(hi, lo)
    return d / np.linalg.norm(d)


def intersection_angle(camA: RpcCamera, camB: RpcCamera, p: WorldPoint, delta: float = 50.0) -> float:
    """Angle in degrees between the two viewing rays through world point ``p``."""
    p = WorldPoint(*(float(v) for v in p))
    da = view_direction(camA, p, delta)
    db = view_direction(camB, p, delta)
    # atan2 form stays accurate for tiny angles
    return math.degrees(math.atan2(np.linalg.norm(np.cross(da, db)), float(np.dot(da, db))))
