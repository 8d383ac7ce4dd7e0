"""Raster value types shared across modules."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from semstereo.errors import ArgumentError

# in-memory and on-disk invalid marker for disparities and heights
INVALID = np.nan


@dataclass(frozen=True, eq=False)
class DisparityMap:
    """Signed horizontal disparity in the left rectified frame.

    Convention: right column = left column + d. Invalid pixels hold NaN.
    """

    values: np.ndarray
    d_min: float
    d_max: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ArgumentError("disparity values must be a 2-D array")
        object.__setattr__(self, "values", v)
        if self.d_min > self.d_max:
            raise ArgumentError("d_min must not exceed d_max")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)

    def check_range(self, tol: float = 1e-9) -> bool:
        v = self.values[self.valid]
        return bool(v.size == 0 or (v.min() >= self.d_min - tol and v.max() <= self.d_max + tol))

    @classmethod
    def from_truth(cls, values: np.ndarray) -> "DisparityMap":
        v = np.asarray(values, float)
        ok = np.isfinite(v)
        if not ok.any():
            return cls(v, 0.0, 0.0)
        return cls(v, float(v[ok].min()), float(v[ok].max()))


@dataclass(frozen=True, eq=False)
class HeightField:
    """North-up regular grid of heights with NaN nodata and optional class codes.

    ``origin`` is the world (x, y) of the top-left corner of cell (0, 0);
    columns run toward +x and rows toward -y.
    """

    origin: tuple[float, float]
    cell_size: float
    heights: np.ndarray
    classes: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ArgumentError("cell size must be positive")
        h = np.asarray(self.heights, dtype=float)
        if h.ndim != 2:
            raise ArgumentError("heights must be a 2-D array")
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        if self.classes is not None:
            c = np.asarray(self.classes, dtype=np.uint8)
            if c.shape != h.shape:
                raise ArgumentError("class raster shape differs from height raster")
            object.__setattr__(self, "classes", c)

    @property
    def rows(self) -> int:
        return self.heights.shape[0]

    @property
    def cols(self) -> int:
        return self.heights.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.heights)

    def same_grid(self, other: "HeightField", tol: float = 1e-9) -> bool:
        return (
            self.shape == other.shape
            and abs(self.cell_size - other.cell_size) <= tol
            and abs(self.origin[0] - other.origin[0]) <= tol
            and abs(self.origin[1] - other.origin[1]) <= tol
        )

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World (x, y) of every cell center, each shaped like the grid."""
        c = np.arange(self.cols)
        r = np.arange(self.rows)
        x = self.origin[0] + (c + 0.5) * self.cell_size
        y = self.origin[1] - (r + 0.5) * self.cell_size
        return np.broadcast_to(x[None, :], self.shape), np.broadcast_to(y[:, None], self.shape)

    def world_to_cell(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Fractional (row, col) for world coordinates; integers at cell centers."""
        col = (np.asarray(x, float) - self.origin[0]) / self.cell_size - 0.5
        row = (self.origin[1] - np.asarray(y, float)) / self.cell_size - 0.5
        return row, col

    def sample_nearest(self, x, y) -> np.ndarray:
        row, col = self.world_to_cell(x, y)
        r = np.rint(row).astype(np.int64)
        c = np.rint(col).astype(np.int64)
        inside = (r >= 0) & (r < self.rows) & (c >= 0) & (c < self.cols)
        out = np.full(np.shape(r), np.nan)
        out[inside] = self.heights[r[inside], c[inside]]
        return out

    def translated(self, dx: float = 0.0, dy: float = 0.0, dz: float = 0.0) -> "HeightField":
        """Same arrays with the whole surface moved by (dx, dy, dz)."""
        return replace(
            self,
            origin=(self.origin[0] + dx, self.origin[1] + dy),
            heights=self.heights + dz,
        )

    def with_heights(self, heights: np.ndarray, classes: np.ndarray | None = None) -> "HeightField":
        return HeightField(self.origin, self.cell_size, heights, classes if classes is not None else self.classes)
