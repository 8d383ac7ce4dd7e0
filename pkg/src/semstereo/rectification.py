"""Epipolar rectification of RPC image pairs from virtual correspondences.

Rectifying homographies map source pixels (col, row, 1) to rectified pixels.
Disparity convention throughout: right rectified column = left rectified
column + d.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from semstereo.classes import ClassCode
from semstereo.errors import ArgumentError, DegeneracyError, OutOfBoundsError
from semstereo.geometry import ImagePoint, RpcCamera, WorldBox, WorldPoint, ground_intersect_arrays
from semstereo.rasters import DisparityMap

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float).reshape(3, 3)
        if m[2, 2] != 0:
            m = m / m[2, 2]
        if not abs(np.linalg.det(m)) > 1e-12:
            raise DegeneracyError("homography is not invertible")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.matrix @ other.matrix)

    def apply(self, line, samp):
        """Map (line, samp) arrays; returns (line', samp')."""
        line = np.asarray(line, float)
        samp = np.asarray(samp, float)
        m = self.matrix
        w = m[2, 0] * samp + m[2, 1] * line + m[2, 2]
        x = (m[0, 0] * samp + m[0, 1] * line + m[0, 2]) / w
        y = (m[1, 0] * samp + m[1, 1] * line + m[1, 2]) / w
        return y, x

    def to_list(self) -> list[float]:
        return [float(v) for v in self.matrix.ravel()]


@dataclass(frozen=True)
class VirtualCorrespondence:
    world: WorldPoint
    ipL: ImagePoint
    ipR: ImagePoint


def virtual_correspondences(
    camL: RpcCamera,
    camR: RpcCamera,
    bounds: WorldBox,
    grid: tuple[int, int, int] = (7, 7, 5),
) -> list[VirtualCorrespondence]:
    """Project a regular world grid into both images.

    Order is row-major over (z, y, x) with x fastest. At least two heights
    are required since height variation is what reveals the epipolar
    direction.
    """
    nx, ny, nz = (int(v) for v in grid)
    if min(nx, ny) < 1:
        raise ArgumentError(f"invalid correspondence grid {grid}")
    if nz < 2 or bounds.zmin == bounds.zmax:
        raise DegeneracyError("virtual correspondences need at least two distinct heights")
    pts = bounds.grid(nx, ny, nz).reshape(-1, 3)
    out = []
    for cam_name, cam in (("left", camL), ("right", camR)):
        P, L, H = cam.normalize_world(pts[:, 0], pts[:, 1], pts[:, 2])
        worst = np.max(np.abs(np.stack([P, L, H])), axis=0)
        bad = np.flatnonzero(worst > 2 * cam.validity_bounds)
        if bad.size:
            k = int(bad[0])
            iz, rem = divmod(k, nx * ny)
            iy, ix = divmod(rem, nx)
            raise OutOfBoundsError(
                f"grid node (ix={ix}, iy={iy}, iz={iz}) at {tuple(pts[k])} projects beyond "
                f"2x the {cam_name} camera validity bounds"
            )
    lL, sL = camL.project(pts[:, 0], pts[:, 1], pts[:, 2], check=False)
    lR, sR = camR.project(pts[:, 0], pts[:, 1], pts[:, 2], check=False)
    for k in range(len(pts)):
        out.append(
            VirtualCorrespondence(
                WorldPoint(*(float(v) for v in pts[k])),
                ImagePoint(float(lL[k]), float(sL[k])),
                ImagePoint(float(lR[k]), float(sR[k])),
            )
        )
    return out


def _corr_arrays(corrs):
    world = np.array([c.world for c in corrs], float)
    left = np.array([c.ipL for c in corrs], float)
    right = np.array([c.ipR for c in corrs], float)
    return world, left, right


def fit_homography(src_ls: np.ndarray, dst_ls: np.ndarray) -> Homography:
    """Normalized DLT homography between (line, samp) point sets."""
    src = np.asarray(src_ls, float)[:, ::-1]
    dst = np.asarray(dst_ls, float)[:, ::-1]

    def norm(p):
        c = p.mean(axis=0)
        s = math.sqrt(2) / max(np.sqrt(np.mean(np.sum((p - c) ** 2, axis=1))), 1e-300)
        return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])

    Ts, Td = norm(src), norm(dst)
    a = (Ts @ np.c_[src, np.ones(len(src))].T).T
    b = (Td @ np.c_[dst, np.ones(len(dst))].T).T
    A = np.zeros((2 * len(a), 9))
    A[0::2, 0:3] = a
    A[0::2, 6:9] = -b[:, 0:1] * a
    A[1::2, 3:6] = a
    A[1::2, 6:9] = -b[:, 1:2] * a
    _, _, vt = np.linalg.svd(A)
    Hn = vt[-1].reshape(3, 3)
    return Homography(np.linalg.solve(Td, Hn @ Ts))


def _rotation_about(theta: float, center: np.ndarray) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    T = np.array([[1.0, 0.0, center[0]], [0.0, 1.0, center[1]], [0.0, 0.0, 1.0]])
    Ti = np.array([[1.0, 0.0, -center[0]], [0.0, 1.0, -center[1]], [0.0, 0.0, 1.0]])
    return T @ R @ Ti


def _apply(M: np.ndarray, xy: np.ndarray) -> np.ndarray:
    p = M @ np.c_[xy, np.ones(len(xy))].T
    return (p[:2] / p[2]).T


def _wrap_half_turn(theta: float) -> float:
    """Wrap an angle to (-pi/2, pi/2]."""
    while theta <= -math.pi / 2:
        theta += math.pi
    while theta > math.pi / 2:
        theta -= math.pi
    return theta


def affine_fundamental(xyL: np.ndarray, xyR: np.ndarray) -> np.ndarray:
    """Total least squares affine epipolar constraint a*xR + b*yR + c*xL + d*yL + e = 0.

    Returns (a, b, c, d, e). Raises DegeneracyError when the correspondences
    satisfy more than one such constraint (planar scene or zero baseline).
    """
    data = np.c_[xyR, xyL]
    center = data.mean(axis=0)
    scale = np.sqrt(np.mean((data - center) ** 2, axis=0))
    if np.any(scale == 0):
        raise DegeneracyError("correspondences do not span the image")
    z = (data - center) / scale
    _, s, vt = np.linalg.svd(z, full_matrices=False)
    if s[-2] <= 1e-7 * s[0]:
        raise DegeneracyError("epipolar geometry is degenerate (zero baseline or planar correspondences)")
    v = vt[-1] / scale
    e = -float(v @ center)
    return np.r_[v, e]


@dataclass(frozen=True, eq=False)
class Rectification:
    """Fitted rectifying transforms plus held-out accuracy."""

    h_left: Homography
    h_right: Homography
    out_size: tuple[int, int]
    z_ref: float
    holdout_rms: float
    holdout_max: float
    parallax_per_meter: float = field(default=0.0)

    def __iter__(self):
        # unpacks as (h_left, h_right)
        return iter((self.h_left, self.h_right))


def fit_rectifying_transforms(
    corrs: list[VirtualCorrespondence],
    out_size: tuple[int, int],
    z_ref: float | None = None,
) -> Rectification:
    """Fit rectifying homographies for a pair from virtual correspondences.

    1. Estimate each image's epipolar direction from an affine epipolar
       constraint fitted to the correspondences.
    2. Rotate each image about its correspondence centroid so that direction
       is horizontal (orientations chosen to keep both images upright and
       unmirrored).
    3. Least-squares affine correction of the right image: rows matched to
       left rows (row scale, shear, offset) and columns matched so the plane
       at ``z_ref`` has zero disparity.

    Even-indexed correspondences are used for fitting, odd-indexed ones for
    the held-out y-parallax statistics.
    """
    if len(corrs) < 8:
        raise ArgumentError("need at least 8 virtual correspondences")
    world, left, right = _corr_arrays(corrs)
    zs = np.unique(world[:, 2])
    if zs.size < 2:
        raise DegeneracyError("all correspondences lie at one height")
    if z_ref is None:
        z_ref = 0.5 * (zs.min() + zs.max())
    xyL = left[:, ::-1]
    xyR = right[:, ::-1]
    train = np.arange(len(corrs)) % 2 == 0
    test = ~train
    if test.sum() == 0:
        test = train

    a, b, c, d, _ = affine_fundamental(xyL[train], xyR[train])
    # epipolar lines: c*xL + d*yL = const in the left, a*xR + b*yR = const in the right
    dir_l = np.array([d, -c])
    dir_r = np.array([b, -a])
    if np.linalg.norm(dir_l) < 1e-12 or np.linalg.norm(dir_r) < 1e-12:
        raise DegeneracyError("zero baseline: epipolar direction vanishes")
    theta_l = _wrap_half_turn(-math.atan2(dir_l[1], dir_l[0]))
    theta_r = -math.atan2(dir_r[1], dir_r[0])
    # pick the right orientation closest to the left one
    theta_r = min((theta_r, theta_r + math.pi, theta_r - math.pi), key=lambda t: abs(t - theta_l))

    cL = xyL[train].mean(axis=0)
    cR = xyR[train].mean(axis=0)
    RL = _rotation_about(theta_l, cL)

    def right_fit(theta):
        RR = _rotation_about(theta, cR)
        pl = _apply(RL, xyL)
        pr = _apply(RR, xyR)
        A = np.c_[pr[train, 1], pr[train, 0], np.ones(train.sum())]
        rows, *_ = np.linalg.lstsq(A, pl[train, 1], rcond=None)
        return RR, pl, pr, rows

    RR, pl, pr, row_coef = right_fit(theta_r)
    if row_coef[0] < 0:
        # right image would be upside down relative to the left
        RR, pl, pr, row_coef = right_fit(theta_r + math.pi)
    alpha, beta, gamma = row_coef
    if np.linalg.matrix_rank(np.c_[pr[train], np.ones(train.sum())]) < 3:
        raise DegeneracyError("right correspondences are collinear; affine fit is rank deficient")

    dz = world[:, 2] - z_ref
    A = np.c_[pr[train, 0], pr[train, 1], np.ones(train.sum()), dz[train]]
    if np.linalg.matrix_rank(A) < 4:
        raise DegeneracyError("column fit is rank deficient")
    col_coef, *_ = np.linalg.lstsq(A, pl[train, 0], rcond=None)
    e, f, g, k = col_coef
    affine = np.array([[e, f, g], [beta, alpha, gamma], [0.0, 0.0, 1.0]])
    HR = affine @ RR

    h_left = Homography(RL)
    h_right = Homography(HR)
    rl = _apply(h_left.matrix, xyL[test])
    rr = _apply(h_right.matrix, xyR[test])
    yp = rr[:, 1] - rl[:, 1]
    rms = float(np.sqrt(np.mean(yp**2)))
    worst = float(np.max(np.abs(yp)))
    logger.debug("rectification held-out y-parallax rms %.4g px, max %.4g px", rms, worst)
    return Rectification(
        h_left=h_left,
        h_right=h_right,
        out_size=(int(out_size[0]), int(out_size[1])),
        z_ref=float(z_ref),
        holdout_rms=rms,
        holdout_max=worst,
        parallax_per_meter=float(-k),
    )


def warp_image(
    src: np.ndarray,
    h: Homography,
    out_size: tuple[int, int],
    nodata: float | int | None = None,
    nearest: bool | None = None,
) -> np.ndarray:
    """Resample ``src`` into the frame defined by ``h`` (source -> output).

    Float rasters use bilinear interpolation with NaN as default nodata;
    integer (class) rasters use nearest neighbor with UNLABELED as default.
    """
    src = np.asarray(src)
    is_int = np.issubdtype(src.dtype, np.integer) or src.dtype == bool
    if nearest is None:
        nearest = is_int
    if nodata is None:
        nodata = int(ClassCode.UNLABELED) if is_int else np.nan
    rows, cols = out_size
    rr, cc = np.mgrid[0:rows, 0:cols].astype(float)
    sl, ss = h.inverse().apply(rr, cc)
    srows, scols = src.shape[:2]
    if nearest:
        ir = np.floor(sl + 0.5).astype(np.int64)
        ic = np.floor(ss + 0.5).astype(np.int64)
        inside = (ir >= 0) & (ir < srows) & (ic >= 0) & (ic < scols)
        out = np.full((rows, cols), nodata, dtype=src.dtype)
        out[inside] = src[ir[inside], ic[inside]]
        return out
    eps = 1e-9
    inside = (sl >= -eps) & (sl <= srows - 1 + eps) & (ss >= -eps) & (ss <= scols - 1 + eps)
    sl = np.clip(sl, 0, srows - 1)
    ss = np.clip(ss, 0, scols - 1)
    out = ndimage.map_coordinates(src.astype(float), [sl, ss], order=1, mode="nearest")
    out[~inside] = nodata
    return out


def make_truth_disparity(
    camL: RpcCamera,
    camR: RpcCamera,
    rect: Rectification,
    xyz_left: np.ndarray,
    refine: bool = True,
) -> tuple[DisparityMap, np.ndarray]:
    """Truth disparity and y-parallax in the left rectified frame.

    Each rectified left pixel takes the truth point of its nearest source
    pixel. With ``refine`` the point is moved along its height plane onto the
    exact viewing ray of the rectified pixel center, so triangulating
    (row, col) with (row, col + d) recovers it. The point is then projected
    into both images and through both rectifying homographies.
    """
    rows, cols = rect.out_size
    xyz_left = np.asarray(xyz_left, float)
    srows, scols = xyz_left.shape[:2]
    rr, cc = np.mgrid[0:rows, 0:cols].astype(float)
    sl, ss = rect.h_left.inverse().apply(rr, cc)
    ir = np.floor(sl + 0.5).astype(np.int64)
    ic = np.floor(ss + 0.5).astype(np.int64)
    inside = (ir >= 0) & (ir < srows) & (ic >= 0) & (ic < scols)
    X = np.full((rows, cols, 3), np.nan)
    X[inside] = xyz_left[ir[inside], ic[inside]]
    valid = np.all(np.isfinite(X), axis=2)
    if refine and valid.any():
        x, y, _, status = ground_intersect_arrays(camL, sl[valid], ss[valid], X[valid, 2])
        ok = status == 0
        sub = X[valid]
        sub[ok, 0] = x[ok]
        sub[ok, 1] = y[ok]
        sub[~ok] = np.nan
        X[valid] = sub
        valid = np.all(np.isfinite(X), axis=2)

    disp = np.full((rows, cols), np.nan)
    ypar = np.full((rows, cols), np.nan)
    if valid.any():
        pts = X[valid]
        lL, sL = camL.project(pts[:, 0], pts[:, 1], pts[:, 2], check=False)
        lR, sR = camR.project(pts[:, 0], pts[:, 1], pts[:, 2], check=False)
        rl, cl = rect.h_left.apply(lL, sL)
        rR, cR = rect.h_right.apply(lR, sR)
        d = cR - cl
        yp = rR - rl
        good = np.isfinite(d) & np.isfinite(yp)
        disp[valid] = np.where(good, d, np.nan)
        ypar[valid] = np.where(good, yp, np.nan)
    return DisparityMap.from_truth(disp), ypar


def reproject_truth(camL: RpcCamera, camR: RpcCamera, rect: Rectification, X: np.ndarray):
    """Rectified (row, col) of world points in both images; (rowL, colL, rowR, colR)."""
    X = np.asarray(X, float).reshape(-1, 3)
    lL, sL = camL.project(X[:, 0], X[:, 1], X[:, 2], check=False)
    lR, sR = camR.project(X[:, 0], X[:, 1], X[:, 2], check=False)
    rl, cl = rect.h_left.apply(lL, sL)
    rr, cr = rect.h_right.apply(lR, sR)
    return rl, cl, rr, cr


def tile_world_box(
    cam: RpcCamera, image_size: tuple[int, int], zmin: float, zmax: float, margin: float = 0.0
) -> WorldBox:
    """World box covering an image tile's footprint between two heights."""
    rows, cols = image_size
    lines = np.array([0, 0, rows - 1, rows - 1] * 2, float)
    samps = np.array([0, cols - 1, 0, cols - 1] * 2, float)
    hs = np.array([zmin] * 4 + [zmax] * 4, float)
    x, y, _, status = ground_intersect_arrays(cam, lines, samps, hs)
    if np.any(status != 0):
        raise DegeneracyError("cannot localize the tile corners on the height bounds")
    return WorldBox(
        float(x.min() - margin),
        float(x.max() + margin),
        float(y.min() - margin),
        float(y.max() + margin),
        float(zmin),
        float(zmax),
    )


@dataclass(frozen=True, eq=False)
class RectifiedPair:
    """Epipolar-rectified pair with its geometry, truth and metadata."""

    left_image: np.ndarray
    right_image: np.ndarray
    h_left: Homography
    h_right: Homography
    cam_left: RpcCamera
    cam_right: RpcCamera
    truth_disparity: DisparityMap | None = None
    truth_class_left: np.ndarray | None = None
    truth_class_right: np.ndarray | None = None
    y_parallax_rms: float = 0.0
    y_parallax_max: float = 0.0
    left_date: str = ""
    right_date: str = ""
    pair_id: str = ""
    z_ref: float = 0.0

    def __post_init__(self):
        shape = np.shape(self.left_image)
        others = [self.right_image, self.truth_class_left, self.truth_class_right]
        if self.truth_disparity is not None:
            others.append(self.truth_disparity.values)
        for r in others:
            if r is not None and np.shape(r) != shape:
                raise ArgumentError("all rasters of a rectified pair must share dimensions")
        if self.y_parallax_rms > self.y_parallax_max + 1e-12:
            raise ArgumentError("y_parallax_rms cannot exceed y_parallax_max")

    @property
    def shape(self) -> tuple[int, int]:
        return np.shape(self.left_image)


def rectify_pair(
    left: np.ndarray,
    right: np.ndarray,
    camL: RpcCamera,
    camR: RpcCamera,
    zmin: float,
    zmax: float,
    out_size: tuple[int, int] | None = None,
    grid: tuple[int, int, int] = (7, 7, 5),
    xyz_left: np.ndarray | None = None,
    class_left: np.ndarray | None = None,
    class_right: np.ndarray | None = None,
    z_ref: float | None = None,
    left_date: str = "",
    right_date: str = "",
    pair_id: str = "",
) -> RectifiedPair:
    """Rectify a tile pair and, when truth xyz is given, derive truth disparity.

    The disparity-centering height defaults to the median truth height when
    truth exists, else to the middle of [zmin, zmax].
    """
    left = np.asarray(left, float)
    right = np.asarray(right, float)
    out_size = tuple(out_size or left.shape)
    box = tile_world_box(camL, left.shape, zmin, zmax)
    corrs = virtual_correspondences(camL, camR, box, grid)
    if z_ref is None and xyz_left is not None and np.isfinite(xyz_left[..., 2]).any():
        z_ref = float(np.nanmedian(xyz_left[..., 2]))
    rect = fit_rectifying_transforms(corrs, out_size, z_ref=z_ref)
    left_r = warp_image(left, rect.h_left, out_size)
    right_r = warp_image(right, rect.h_right, out_size)
    truth = None
    yp_rms, yp_max = rect.holdout_rms, rect.holdout_max
    if xyz_left is not None:
        truth, ypar = make_truth_disparity(camL, camR, rect, xyz_left)
        ok = np.isfinite(ypar)
        if ok.any():
            yp_rms = float(np.sqrt(np.mean(ypar[ok] ** 2)))
            yp_max = float(np.max(np.abs(ypar[ok])))
    cl = warp_image(class_left, rect.h_left, out_size) if class_left is not None else None
    cr = warp_image(class_right, rect.h_right, out_size) if class_right is not None else None
    return RectifiedPair(
        left_image=left_r,
        right_image=right_r,
        h_left=rect.h_left,
        h_right=rect.h_right,
        cam_left=camL,
        cam_right=camR,
        truth_disparity=truth,
        truth_class_left=cl,
        truth_class_right=cr,
        y_parallax_rms=yp_rms,
        y_parallax_max=yp_max,
        left_date=left_date,
        right_date=right_date,
        pair_id=pair_id,
        z_ref=rect.z_ref,
    )


def occlusion_mask(
    truth: DisparityMap, z_left: np.ndarray, z_right: np.ndarray, tol: float = 1.0
) -> np.ndarray:
    """True where a valid truth pixel is hidden in the right image.

    ``z_left`` and ``z_right`` are truth surface heights warped into the
    left and right rectified frames. A left pixel is visible when the right
    surface at (row, col + d) lies within ``tol`` meters of its own height.
    """
    d = truth.values
    rows, cols = d.shape
    valid = np.isfinite(d) & np.isfinite(z_left)
    xr = np.floor(np.arange(cols)[None, :] + np.where(valid, d, 0.0) + 0.5).astype(np.int64)
    inside = valid & (xr >= 0) & (xr < cols)
    zr = np.full(d.shape, np.nan)
    rr = np.broadcast_to(np.arange(rows)[:, None], d.shape)
    zr[inside] = np.asarray(z_right)[rr[inside], xr[inside]]
    seen = inside & (np.abs(zr - z_left) <= tol)
    return np.isfinite(d) & ~seen
