"""From pairwise disparities to labeled 3-D points, gridded heights and
median multi-view fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from semstereo.classes import LABEL_PRIORITY, ClassCode, label_mode
from semstereo.errors import ApproximationError, ArgumentError
from semstereo.geometry import ProjectiveCamera, WorldBox, triangulate_arrays
from semstereo.rasters import DisparityMap, HeightField
from semstereo.rectification import RectifiedPair

__all__ = [
    "HeightField",
    "LabeledPoint",
    "PointCloud",
    "disparity_to_labeled_points",
    "empty_grid",
    "fuse_multiview",
    "rasterize_heights",
]

UNLABELED = int(ClassCode.UNLABELED)
MAX_CAMERA_RESIDUAL_PX = 0.1
# height agreement (m) for a field to count toward a fused cell's support
CONSENSUS_TOL = 1.0


class LabeledPoint(NamedTuple):
    x: float
    y: float
    z: float
    class_id: int
    source: str = ""


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Column-oriented labeled points from one source."""

    xyz: np.ndarray
    labels: np.ndarray
    source: str = ""

    def __post_init__(self):
        xyz = np.asarray(self.xyz, float).reshape(-1, 3)
        labels = np.asarray(self.labels, dtype=np.uint8).ravel()
        if labels.shape[0] != xyz.shape[0]:
            raise ArgumentError("one label per point is required")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def __iter__(self) -> Iterator[LabeledPoint]:
        for (x, y, z), c in zip(self.xyz.tolist(), self.labels.tolist()):
            yield LabeledPoint(x, y, z, c, self.source)

    @classmethod
    def from_points(cls, points: Sequence[LabeledPoint], source: str = "") -> "PointCloud":
        if len(points) == 0:
            return cls(np.empty((0, 3)), np.empty(0, np.uint8), source)
        arr = np.array([(p.x, p.y, p.z) for p in points], float)
        return cls(arr, np.array([p.class_id for p in points], np.uint8), source)

    @classmethod
    def concatenate(cls, clouds: Sequence["PointCloud"], source: str = "") -> "PointCloud":
        if not clouds:
            return cls(np.empty((0, 3)), np.empty(0, np.uint8), source)
        return cls(np.concatenate([c.xyz for c in clouds]), np.concatenate([c.labels for c in clouds]), source)


def disparity_to_labeled_points(
    pair: RectifiedPair,
    disp: DisparityMap,
    camL: ProjectiveCamera,
    camR: ProjectiveCamera,
    labels: np.ndarray | None = None,
    max_camera_residual_px: float = MAX_CAMERA_RESIDUAL_PX,
) -> PointCloud:
    """Triangulate every valid disparity pixel.

    Left rectified (r, c) and right rectified (r, c + d) are mapped back to
    source pixels through the inverse homographies and intersected with the
    per-tile projective cameras. Points inherit the left label (``labels``,
    else the pair's left class raster). Degenerate intersections are dropped.
    """
    if pair.h_left is None or pair.h_right is None:
        raise ArgumentError("the pair carries no rectifying homographies")
    for name, cam in (("left", camL), ("right", camR)):
        if cam.fitted_residual_px >= max_camera_residual_px:
            raise ApproximationError(
                f"{name} projective camera residual {cam.fitted_residual_px:.3g} px exceeds "
                f"{max_camera_residual_px} px",
                cam.fitted_residual_px,
            )
    values = disp.values
    if values.shape != tuple(pair.shape):
        raise ArgumentError("disparity map and pair dimensions differ")
    if labels is None:
        labels = pair.truth_class_left
    if labels is None:
        labels = np.full(values.shape, UNLABELED, dtype=np.uint8)
    r, c = np.nonzero(np.isfinite(values))
    d = values[r, c]
    rf, cf = r.astype(float), c.astype(float)
    lineL, sampL = pair.h_left.inverse().apply(rf, cf)
    lineR, sampR = pair.h_right.inverse().apply(rf, cf + d)
    if r.size == 0:
        return PointCloud(np.empty((0, 3)), np.empty(0, np.uint8), pair.pair_id)
    X, _, ok = triangulate_arrays(camL, camR, lineL, sampL, lineR, sampR)
    return PointCloud(X[ok], np.asarray(labels)[r[ok], c[ok]], pair.pair_id)


def empty_grid(origin: tuple[float, float], cell_size: float, shape: tuple[int, int]) -> HeightField:
    return HeightField(origin, cell_size, np.full(shape, np.nan), np.full(shape, UNLABELED, np.uint8))


def grid_for_box(box: WorldBox, cell_size: float) -> HeightField:
    """Empty grid whose cells tile the planimetric extent of ``box``."""
    cols = int(math.ceil((box.xmax - box.xmin) / cell_size))
    rows = int(math.ceil((box.ymax - box.ymin) / cell_size))
    return empty_grid((box.xmin, box.ymax), cell_size, (rows, cols))


def rasterize_heights(points: PointCloud | Sequence[LabeledPoint], grid: HeightField) -> HeightField:
    """Median height and modal label of the points falling in each cell.

    Label ties follow BUILDING > TREE > WATER > GROUND; UNLABELED points
    do not vote. Cells without points are nodata.
    """
    if not isinstance(points, PointCloud):
        points = PointCloud.from_points(list(points))
    rows, cols = grid.shape
    heights = np.full(grid.shape, np.nan)
    classes = np.full(grid.shape, UNLABELED, dtype=np.uint8)
    if len(points) == 0:
        return HeightField(grid.origin, grid.cell_size, heights, classes)
    xyz = points.xyz
    fr, fc = grid.world_to_cell(xyz[:, 0], xyz[:, 1])
    ri = np.floor(fr + 0.5).astype(np.int64)
    ci = np.floor(fc + 0.5).astype(np.int64)
    inside = (ri >= 0) & (ri < rows) & (ci >= 0) & (ci < cols) & np.isfinite(xyz[:, 2])
    cell = ri[inside] * cols + ci[inside]
    z = xyz[inside, 2]
    lab = points.labels[inside]

    order = np.lexsort((z, cell))
    cell_s, z_s = cell[order], z[order]
    starts = np.flatnonzero(np.r_[True, cell_s[1:] != cell_s[:-1]])
    counts = np.diff(np.r_[starts, cell_s.size])
    lo = starts + (counts - 1) // 2
    hi = starts + counts // 2
    flat_h = heights.ravel()
    flat_h[cell_s[starts]] = 0.5 * (z_s[lo] + z_s[hi])

    # label votes, columns in priority order so argmax resolves ties
    codes = np.array([int(c) for c in LABEL_PRIORITY])
    votes = np.zeros((rows * cols, codes.size), dtype=np.int64)
    for k, code in enumerate(codes):
        sel = lab == code
        votes[:, k] = np.bincount(cell[sel], minlength=rows * cols)
    has = votes.sum(axis=1) > 0
    flat_c = classes.ravel()
    flat_c[has] = codes[np.argmax(votes[has], axis=1)]
    return HeightField(grid.origin, grid.cell_size, heights, classes)


def fuse_multiview(
    per_pair: Sequence[HeightField],
    min_support: int | None = None,
    consensus_tol: float = CONSENSUS_TOL,
) -> HeightField:
    """Per-cell median of heights and modal label across pairwise fields.

    A cell is valid when at least ``min_support`` fields (default
    ceil(N / 3)) have a height within ``consensus_tol`` meters of the cell
    median. Pass ``math.inf`` to count every contributing field. Labels are
    voted among the fields that contribute a height.
    """
    fields = list(per_pair)
    if not fields:
        raise ArgumentError("nothing to fuse")
    if not consensus_tol > 0:
        raise ArgumentError("consensus_tol must be positive")
    ref = fields[0]
    for k, f in enumerate(fields[1:], start=1):
        if not f.same_grid(ref):
            raise ArgumentError(f"height field {k} is not on the common grid")
    n = len(fields)
    if min_support is None:
        min_support = math.ceil(n / 3)
    stack = np.stack([f.heights for f in fields])
    valid = np.isfinite(stack)
    any_valid = valid.any(axis=0)
    fused = np.full(ref.shape, np.nan)
    fused[any_valid] = np.nanmedian(stack[:, any_valid], axis=0)
    # support counts only fields that agree with the median
    with np.errstate(invalid="ignore"):
        agree = valid & (np.abs(stack - fused) <= consensus_tol)
    ok = agree.sum(axis=0) >= max(1, int(min_support))
    fused[~ok] = np.nan
    labels = np.stack(
        [f.classes if f.classes is not None else np.full(ref.shape, UNLABELED, np.uint8) for f in fields]
    )
    labels = np.where(valid, labels, UNLABELED)
    fused_labels = label_mode(labels, axis=0)
    fused_labels[~ok] = UNLABELED
    return HeightField(ref.origin, ref.cell_size, fused, fused_labels)
