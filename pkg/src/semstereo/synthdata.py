"""Deterministic synthetic scenes, satellite-like cameras and renderings.

Scenes are heightfields on a north-up grid (x east, y north, z up) with a
terrain model, a surface model, a class raster and a base albedo texture.
Views are rendered by splatting surface samples through an RPC camera with
a max-height z-buffer, which stands in for visibility along the viewing ray.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from semstereo.classes import ClassCode
from semstereo.errors import ArgumentError, DataError, PoleError
from semstereo.geometry import ProjectiveCamera, RpcCamera, WorldBox, ground_intersect_arrays
from semstereo.rasters import HeightField

logger = logging.getLogger(__name__)

GROUND = int(ClassCode.GROUND)
TREE = int(ClassCode.TREE)
BUILDING = int(ClassCode.BUILDING)
WATER = int(ClassCode.WATER)
UNLABELED = int(ClassCode.UNLABELED)

SHADOW_FACTOR = 0.45
WALL_FACTOR = 0.7
Z_BUFFER_BIN = 0.05


@dataclass(frozen=True, eq=False)
class Scene:
    dtm: HeightField
    dsm: HeightField
    classes: np.ndarray
    texture: np.ndarray
    seed: int
    gsd: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.dsm.shape

    def bounds(self, pad_z: float = 0.0) -> WorldBox:
        x0, y0 = self.dsm.origin
        rows, cols = self.shape
        return WorldBox(
            x0,
            x0 + cols * self.gsd,
            y0 - rows * self.gsd,
            y0,
            float(np.nanmin(self.dtm.heights)) - pad_z,
            float(np.nanmax(self.dsm.heights)) + pad_z,
        )

    def center(self) -> tuple[float, float, float]:
        b = self.bounds()
        return (0.5 * (b.xmin + b.xmax), 0.5 * (b.ymin + b.ymax), float(np.median(self.dtm.heights)))

    def class_fractions(self) -> dict[str, float]:
        n = self.classes.size
        return {c.name: float(np.count_nonzero(self.classes == int(c))) / n for c in ClassCode}


@dataclass(frozen=True)
class SeasonParams:
    """Per-date appearance and geometry perturbation.

    ``construction_fraction`` demolishes or raises that fraction of the
    buildings; like leaf-off foliage and vehicles it is geometric change
    that the lidar-date truth does not contain.
    """

    tree_albedo_scale: float = 1.0
    leaf_off: bool = False
    leaf_off_factor: float = 0.5
    vehicle_density: float = 0.0
    construction_fraction: float = 0.0
    noise_sigma: float = 0.0
    sun_azimuth: float = 150.0
    sun_elevation: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.sun_elevation <= 90.0:
            raise ArgumentError("sun_elevation must lie in (0, 90] degrees")
        if self.noise_sigma < 0 or self.vehicle_density < 0:
            raise ArgumentError("noise_sigma and vehicle_density must be nonnegative")
        if not 0.0 <= self.construction_fraction <= 1.0:
            raise ArgumentError("construction_fraction must lie in [0, 1]")


# ---------------------------------------------------------------------------
# scene generation


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _texture(rng: np.random.Generator, shape) -> np.ndarray:
    fine = _smooth_field(rng, shape, 0.8)
    mid = _smooth_field(rng, shape, 2.5)
    coarse = _smooth_field(rng, shape, 8.0)
    return 0.09 * fine + 0.07 * mid + 0.05 * coarse


def gen_scene(
    seed: int,
    size: tuple[int, int] = (512, 512),
    composition: dict[str, float] | None = None,
    gsd: float = 0.5,
    origin: tuple[float, float] | None = None,
    terrain_relief: float = 4.0,
    building_heights: tuple[float, float] = (5.0, 30.0),
    tree_heights: tuple[float, float] = (6.0, 15.0),
) -> Scene:
    """Generate a seeded urban scene.

    Args:
        seed: RNG seed; identical seeds give bit-identical scenes.
        size: (rows, cols) of the scene grid.
        composition: target area fractions for ``building``, ``tree`` and
            ``water``; ground takes the rest.
        gsd: cell size in meters.
        origin: world (x, y) of the top-left corner; defaults to centering
            the scene on (0, 0).
    """
    comp = {"building": 0.25, "tree": 0.15, "water": 0.05}
    if composition:
        unknown = set(composition) - set(comp)
        if unknown:
            raise ArgumentError(f"unknown composition classes {sorted(unknown)}")
        comp.update(composition)
    if any(v < 0 for v in comp.values()) or sum(comp.values()) > 1.0:
        raise ArgumentError("composition targets must be nonnegative and sum to at most 1")
    rows, cols = (int(v) for v in size)
    if rows < 16 or cols < 16:
        raise ArgumentError("scene must be at least 16x16 cells")
    min_building_cells = int(math.ceil(8.0 / gsd)) ** 2
    if comp["building"] > 0 and comp["building"] * rows * cols < min_building_cells:
        raise ArgumentError("building target is infeasible for this scene size")
    if sum(comp.values()) > 0.9:
        raise ArgumentError("composition leaves too little ground to place objects")
    if origin is None:
        origin = (-cols * gsd / 2.0, rows * gsd / 2.0)

    rng = np.random.default_rng(seed)
    shape = (rows, cols)
    terrain = _smooth_field(rng, shape, max(rows, cols) / 8.0) * terrain_relief / 2.0
    classes = np.full(shape, GROUND, dtype=np.uint8)

    if comp["water"] > 0:
        level = np.quantile(terrain, comp["water"])
        water = terrain <= level
        classes[water] = WATER
        terrain = np.where(water, level, terrain)
    dtm = terrain.copy()
    dsm = dtm.copy()
    texture = 0.36 + _texture(rng, shape)
    texture[classes == WATER] = 0.12 + 0.2 * (texture[classes == WATER] - 0.36)

    # buildings: non-overlapping extruded rectangles with flat roofs
    target = comp["building"] * rows * cols
    placed = 0
    occupied = classes != GROUND
    gap = max(1, int(round(2.0 / gsd)))
    attempts = 0
    while placed < target and attempts < 20000:
        attempts += 1
        h = int(rng.integers(int(8 / gsd), int(40 / gsd) + 1))
        w = int(rng.integers(int(8 / gsd), int(40 / gsd) + 1))
        h = min(h, rows - 2)
        w = min(w, cols - 2)
        if placed + h * w > target + 0.02 * rows * cols:
            continue
        r0 = int(rng.integers(1, rows - h))
        c0 = int(rng.integers(1, cols - w))
        ra, rb = max(0, r0 - gap), min(rows, r0 + h + gap)
        ca, cb = max(0, c0 - gap), min(cols, c0 + w + gap)
        if occupied[ra:rb, ca:cb].any():
            continue
        roof = float(dtm[r0 : r0 + h, c0 : c0 + w].max()) + float(rng.uniform(*building_heights))
        dsm[r0 : r0 + h, c0 : c0 + w] = roof
        classes[r0 : r0 + h, c0 : c0 + w] = BUILDING
        occupied[r0 : r0 + h, c0 : c0 + w] = True
        base = float(rng.uniform(0.25, 0.75))
        pattern = 0.6 * _texture(rng, (h, w)) + 0.04 * np.sin(np.arange(w) * rng.uniform(0.5, 1.5))[None, :]
        texture[r0 : r0 + h, c0 : c0 + w] = base + pattern
        placed += h * w

    # trees: canopy domes on free ground
    target = comp["tree"] * rows * cols
    placed = 0
    attempts = 0
    yy, xx = np.mgrid[0:rows, 0:cols]
    free = classes == GROUND
    while placed < target and attempts < 50000:
        attempts += 1
        radius = float(rng.uniform(2.0, 6.0)) / gsd
        r0 = float(rng.uniform(0, rows))
        c0 = float(rng.uniform(0, cols))
        ra, rb = int(max(0, r0 - radius - 1)), int(min(rows, r0 + radius + 2))
        ca, cb = int(max(0, c0 - radius - 1)), int(min(cols, c0 + radius + 2))
        d2 = ((yy[ra:rb, ca:cb] - r0) ** 2 + (xx[ra:rb, ca:cb] - c0) ** 2) / radius**2
        disk = (d2 <= 1.0) & free[ra:rb, ca:cb]
        n_new = int(disk.sum())
        if n_new == 0 or placed + n_new > target + 0.01 * rows * cols:
            continue
        top = float(rng.uniform(*tree_heights))
        canopy = dtm[ra:rb, ca:cb] + top * np.sqrt(np.clip(1.0 - 0.6 * d2, 0.0, 1.0))
        sub_dsm = dsm[ra:rb, ca:cb]
        sub_dsm[disk] = np.maximum(sub_dsm[disk], canopy[disk])
        classes[ra:rb, ca:cb][disk] = TREE
        free[ra:rb, ca:cb][disk] = False
        placed += n_new
    tree = classes == TREE
    texture[tree] = 0.2 + 0.8 * (texture[tree] - 0.36)

    texture = np.clip(texture, 0.02, 0.98)
    dtm_f = HeightField(origin, gsd, dtm)
    dsm_f = HeightField(origin, gsd, dsm, classes)
    return Scene(dtm=dtm_f, dsm=dsm_f, classes=classes, texture=texture, seed=seed, gsd=gsd)


def flat_scene(size: tuple[int, int], gsd: float = 0.5, seed: int = 0, height: float = 0.0) -> Scene:
    """Textured flat ground-only scene (handy for tests)."""
    rng = np.random.default_rng(seed)
    rows, cols = size
    origin = (-cols * gsd / 2.0, rows * gsd / 2.0)
    z = np.full(size, float(height))
    classes = np.full(size, GROUND, dtype=np.uint8)
    texture = np.clip(0.4 + _texture(rng, size), 0.02, 0.98)
    return Scene(
        HeightField(origin, gsd, z),
        HeightField(origin, gsd, z.copy(), classes),
        classes,
        texture,
        seed,
        gsd,
    )


def apply_season(scene: Scene, season: SeasonParams) -> Scene:
    """Scene as observed on a given date: leaf-off canopy, construction and vehicles."""
    rng = np.random.default_rng([scene.seed, season.seed, 7])
    dsm = scene.dsm.heights.copy()
    dtm = scene.dtm.heights
    classes = scene.classes.copy()
    texture = scene.texture.copy()
    tree = classes == TREE
    if season.leaf_off:
        dsm[tree] = dtm[tree] + season.leaf_off_factor * (dsm[tree] - dtm[tree])
    if season.construction_fraction > 0:
        labels, n = ndimage.label(classes == BUILDING)
        for k in range(1, n + 1):
            if rng.uniform() >= season.construction_fraction:
                continue
            m = labels == k
            if rng.uniform() < 0.5:
                # demolished: bare lot
                dsm[m] = dtm[m]
                classes[m] = GROUND
                texture[m] = 0.45 + 0.5 * (texture[m] - texture[m].mean())
            else:
                dsm[m] = dtm[m].max() + rng.uniform(25.0, 45.0)
                texture[m] = np.clip(rng.uniform(0.3, 0.8) + 0.5 * (texture[m] - texture[m].mean()), 0, 1)
    if season.vehicle_density > 0:
        # vehicle_density: vehicles per 1000 m^2 of ground
        ground = classes == GROUND
        area = ground.sum() * scene.gsd**2
        count = int(rng.poisson(season.vehicle_density * area / 1000.0))
        lw = max(1, int(round(4.5 / scene.gsd)))
        ww = max(1, int(round(2.0 / scene.gsd)))
        rows, cols = classes.shape
        for _ in range(count):
            horizontal = rng.uniform() < 0.5
            h, w = (ww, lw) if horizontal else (lw, ww)
            r0 = int(rng.integers(0, rows - h))
            c0 = int(rng.integers(0, cols - w))
            if not ground[r0 : r0 + h, c0 : c0 + w].all():
                continue
            dsm[r0 : r0 + h, c0 : c0 + w] = dtm[r0 : r0 + h, c0 : c0 + w] + 1.5
            texture[r0 : r0 + h, c0 : c0 + w] = rng.uniform(0.05, 0.95)
    if season.tree_albedo_scale != 1.0:
        texture[tree] = np.clip(texture[tree] * season.tree_albedo_scale, 0.0, 1.0)
    return replace(
        scene,
        dsm=HeightField(scene.dsm.origin, scene.gsd, dsm, classes),
        classes=classes,
        texture=texture,
    )


# ---------------------------------------------------------------------------
# shadows


def cast_shadows(dsm: HeightField, sun_azimuth: float, sun_elevation: float) -> np.ndarray:
    """Boolean shadow mask by marching toward the sun one cell at a time.

    A cell is shadowed when some cell at distance r (cells) along the sun
    azimuth is higher than the cell by more than r * cell * tan(elevation).
    Azimuth is clockwise from north (+y).
    """
    if not 0.0 < sun_elevation <= 90.0:
        raise ArgumentError("sun_elevation must lie in (0, 90] degrees")
    h = np.where(np.isfinite(dsm.heights), dsm.heights, -np.inf)
    shadow = np.zeros(h.shape, dtype=bool)
    if sun_elevation >= 90.0:
        return shadow
    finite = h[np.isfinite(h)]
    if finite.size == 0:
        return shadow
    slope = math.tan(math.radians(sun_elevation)) * dsm.cell_size
    max_r = int(math.ceil((finite.max() - finite.min()) / slope))
    az = math.radians(sun_azimuth)
    dcol, drow = math.sin(az), -math.cos(az)
    rows, cols = h.shape
    rr, cc = np.mgrid[0:rows, 0:cols]
    for r in range(1, max_r + 1):
        sr = rr + int(round(r * drow))
        sc = cc + int(round(r * dcol))
        inside = (sr >= 0) & (sr < rows) & (sc >= 0) & (sc < cols)
        blocker = np.full(h.shape, -np.inf)
        blocker[inside] = h[sr[inside], sc[inside]]
        shadow |= blocker > h + r * slope
    return shadow


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class NormalizationSpec:
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

    @classmethod
    def for_volume(cls, box: WorldBox, image_size: tuple[int, int]) -> "NormalizationSpec":
        rows, cols = image_size
        return cls(
            x_off=0.5 * (box.xmin + box.xmax),
            x_scale=0.5 * (box.xmax - box.xmin),
            y_off=0.5 * (box.ymin + box.ymax),
            y_scale=0.5 * (box.ymax - box.ymin),
            h_off=0.5 * (box.zmin + box.zmax),
            h_scale=max(0.5 * (box.zmax - box.zmin), 1.0),
            line_off=(rows - 1) / 2.0,
            line_scale=rows / 2.0,
            samp_off=(cols - 1) / 2.0,
            samp_scale=cols / 2.0,
        )


def frame_camera(
    center: tuple[float, float, float],
    azimuth_deg: float,
    off_nadir_deg: float,
    gsd: float,
    size: tuple[int, int],
    altitude: float = 500e3,
    principal: tuple[float, float] | None = None,
) -> ProjectiveCamera:
    """Distant pinhole camera looking at ``center`` from a given azimuth and off-nadir angle.

    Image columns point roughly east and rows roughly south; ``gsd`` is the
    footprint of a pixel perpendicular to the line of sight. ``principal``
    is the (line, samp) where ``center`` appears, the image center by default.
    """
    rows, cols = size
    theta = math.radians(off_nadir_deg)
    phi = math.radians(azimuth_deg)
    slant = altitude / math.cos(theta)
    c = np.asarray(center, float)
    C = c + slant * np.array([math.sin(theta) * math.sin(phi), math.sin(theta) * math.cos(phi), math.cos(theta)])
    z_cam = (c - C) / np.linalg.norm(c - C)
    east = np.array([1.0, 0.0, 0.0])
    x_cam = east - np.dot(east, z_cam) * z_cam
    x_cam /= np.linalg.norm(x_cam)
    y_cam = np.cross(z_cam, x_cam)
    R = np.stack([x_cam, y_cam, z_cam])
    f = slant / gsd
    if principal is None:
        principal = ((rows - 1) / 2.0, (cols - 1) / 2.0)
    K = np.array([[f, 0.0, principal[1]], [0.0, f, principal[0]], [0.0, 0.0, 1.0]])
    M = K @ np.c_[R, -R @ C]
    return ProjectiveCamera(M)


def synth_rpc_from_projective(
    cam: ProjectiveCamera,
    norm: NormalizationSpec,
    cubic_jitter: float = 0.0,
    seed: int = 0,
    validity_bounds: float = 1.2,
) -> RpcCamera:
    """Express a 3x4 projection as an RPC model, optionally adding cubic terms.

    With zero jitter the result is an exact degree-1 rational equal to the
    projection. Jitter adds uniform random second- and third-order terms to
    all four polynomials; each of the 16 coefficients is drawn from
    [-j/16, j/16], so ``j`` bounds the added perturbation over the unit cube.
    """
    T = np.array(
        [
            [norm.x_scale, 0.0, 0.0, norm.x_off],
            [0.0, norm.y_scale, 0.0, norm.y_off],
            [0.0, 0.0, norm.h_scale, norm.h_off],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    A = cam.matrix @ T  # rows (u, v, w) over (L, P, H, 1)
    w = A[2]
    if abs(w[3]) < 1e-300:
        raise PoleError("projection denominator vanishes at the normalization center")
    samp_num = (A[0] - norm.samp_off * w) / norm.samp_scale
    line_num = (A[1] - norm.line_off * w) / norm.line_scale

    def to_terms(row):
        t = np.zeros(20)
        t[0], t[1], t[2], t[3] = row[3], row[0], row[1], row[2]
        return t / w[3]

    polys = [to_terms(line_num), to_terms(w), to_terms(samp_num), to_terms(w)]
    if cubic_jitter:
        rng = np.random.default_rng(seed)
        for p in polys:
            p[4:] += rng.uniform(-cubic_jitter, cubic_jitter, 16) / 16.0
    rpc = RpcCamera(
        line_num=polys[0],
        line_den=polys[1],
        samp_num=polys[2],
        samp_den=polys[3],
        x_off=norm.x_off,
        x_scale=norm.x_scale,
        y_off=norm.y_off,
        y_scale=norm.y_scale,
        h_off=norm.h_off,
        h_scale=norm.h_scale,
        line_off=norm.line_off,
        line_scale=norm.line_scale,
        samp_off=norm.samp_off,
        samp_scale=norm.samp_scale,
        validity_bounds=validity_bounds,
    )
    rpc.check_poles()
    return rpc


@dataclass(frozen=True)
class ViewSpec:
    """Acquisition geometry and date of one synthetic image."""

    azimuth: float
    off_nadir: float
    date: str = "2015-06-01"
    season: SeasonParams = field(default_factory=SeasonParams)


def view_camera(
    scene: Scene,
    view: ViewSpec,
    size: tuple[int, int],
    gsd: float | None = None,
    cubic_jitter: float = 0.0,
    seed: int = 0,
) -> tuple[ProjectiveCamera, RpcCamera]:
    """Pinhole camera for a view of the scene center plus its RPC expression."""
    gsd = scene.gsd if gsd is None else gsd
    center = scene.center()
    proj = frame_camera(center, view.azimuth, view.off_nadir, gsd, size)
    b = scene.bounds(pad_z=50.0)
    # margin so oblique footprints over the padded height range stay inside validity
    mx = 0.25 * (b.xmax - b.xmin)
    my = 0.25 * (b.ymax - b.ymin)
    box = WorldBox(b.xmin - mx, b.xmax + mx, b.ymin - my, b.ymax + my, b.zmin, b.zmax)
    norm = NormalizationSpec.for_volume(box, size)
    return proj, synth_rpc_from_projective(proj, norm, cubic_jitter, seed)


def tile_rig(
    azimuth: float,
    off_nadir: float,
    seed: int = 0,
    cubic_jitter: float = 0.0,
    tile: int = 2048,
    scene_px: int = 20480,
    gsd: float = 0.5,
    z_range: tuple[float, float] = (-20.0, 80.0),
) -> tuple[RpcCamera, WorldBox]:
    """RPC for a full satellite scene plus the world box of one tile inside it.

    The RPC normalization spans ``scene_px`` pixels; the returned box covers a
    ``tile`` x ``tile`` pixel footprint offset from the scene center.
    """
    rng = np.random.default_rng(seed)
    half = scene_px * gsd / 2.0
    proj = frame_camera((0.0, 0.0, 0.0), azimuth, off_nadir, gsd, (scene_px, scene_px))
    box = WorldBox(-half, half, -half, half, z_range[0] - 200.0, z_range[1] + 200.0)
    norm = NormalizationSpec.for_volume(box, (scene_px, scene_px))
    rpc = synth_rpc_from_projective(proj, norm, cubic_jitter, seed)
    extent = tile * gsd
    cx, cy = rng.uniform(-0.6 * half, 0.6 * half, 2)
    tile_box = WorldBox(cx - extent / 2, cx + extent / 2, cy - extent / 2, cy + extent / 2, *z_range)
    return rpc, tile_box


# ---------------------------------------------------------------------------
# rendering


def _view_azimuth(cam: RpcCamera, scene: Scene) -> np.ndarray | None:
    """Horizontal unit vector from the scene toward the camera, None near nadir."""
    cx, cy, cz = scene.center()
    line, samp = cam.project(cx, cy, cz, check=False)
    xs, ys, _, status = ground_intersect_arrays(cam, [line, line], [samp, samp], [cz, cz + 50.0])
    if np.any(status != 0):
        return None
    d = np.array([xs[1] - xs[0], ys[1] - ys[0]])
    n = np.linalg.norm(d)
    if n < 1e-3:
        return None
    return d / n


def _surface_samples(scene: Scene, toward_camera: np.ndarray | None, supersample: int = 2):
    """World samples of the visible surface: roof/ground tops plus camera-facing walls.

    Returns x, y, z, cell row, cell col, wall flag arrays.
    """
    s = supersample
    rows, cols = scene.shape
    gsd = scene.gsd
    dsm = scene.dsm.heights
    x0, y0 = scene.dsm.origin
    sub = (np.arange(s) + 0.5) / s
    r_idx = np.repeat(np.arange(rows), s)
    c_idx = np.repeat(np.arange(cols), s)
    ys_sub = y0 - (r_idx + np.tile(sub, rows)) * gsd
    xs_sub = x0 + (c_idx + np.tile(sub, cols)) * gsd
    RR, CC = np.meshgrid(r_idx, c_idx, indexing="ij")
    Y, X = np.meshgrid(ys_sub, xs_sub, indexing="ij")
    parts = [(X.ravel(), Y.ravel(), dsm[RR, CC].ravel(), RR.ravel(), CC.ravel(), np.zeros(RR.size, bool))]

    if toward_camera is not None:
        step = gsd / 2.0
        # 4-neighbors (drow, dcol) and their outward world direction (dx, dy)
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            outward = np.array([dc, -dr], float)
            if np.dot(outward, toward_camera) <= 0.05:
                continue
            nb = np.full_like(dsm, np.inf)
            src_r = slice(max(0, dr), rows + min(0, dr))
            dst_r = slice(max(0, -dr), rows + min(0, -dr))
            src_c = slice(max(0, dc), cols + min(0, dc))
            dst_c = slice(max(0, -dc), cols + min(0, -dc))
            nb[dst_r, dst_c] = dsm[src_r, src_c]
            drop = dsm - nb
            wr, wc = np.nonzero(drop > step)
            if wr.size == 0:
                continue
            counts = np.floor(drop[wr, wc] / step).astype(np.int64)
            rep_r = np.repeat(wr, counts)
            rep_c = np.repeat(wc, counts)
            k = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
            z = dsm[rep_r, rep_c] - (k + 1) * step
            # wall sits on the cell edge facing the lower neighbor
            for t in sub:
                along = t - 0.5
                xw = x0 + (rep_c + 0.5 + 0.5 * dc + along * (dr != 0)) * gsd
                yw = y0 - (rep_r + 0.5 + 0.5 * dr + along * (dc != 0)) * gsd
                parts.append((xw, yw, z, rep_r, rep_c, np.ones(z.size, bool)))
    x, y, z, r, c, wall = (np.concatenate(p) for p in zip(*parts))
    return x, y, z, r, c, wall


@dataclass(frozen=True, eq=False)
class _Splat:
    shape: tuple[int, int]
    winner: np.ndarray  # flat sample index per pixel, -1 where empty
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    r: np.ndarray
    c: np.ndarray
    wall: np.ndarray
    px: np.ndarray  # per-pixel world x of the pixel center on the winning surface, NaN where empty
    py: np.ndarray


def _ground_jacobian_inv(cam: RpcCamera, scene: Scene) -> np.ndarray:
    """Inverse of d(line, samp)/d(x, y) at the scene center."""
    cx, cy, cz = scene.center()
    line, samp = cam.project([cx, cx + 1.0, cx], [cy, cy, cy + 1.0], [cz, cz, cz], check=False)
    J = np.array([[line[1] - line[0], line[2] - line[0]], [samp[1] - samp[0], samp[2] - samp[0]]])
    return np.linalg.inv(J)


def _image_gsd(cam: RpcCamera, scene: Scene) -> float:
    """Ground distance per image pixel near the scene center."""
    cx, cy, cz = scene.center()
    line, samp = cam.project([cx, cx + 1.0, cx], [cy, cy, cy + 1.0], [cz, cz, cz], check=False)
    per_m = max(np.hypot(line[1] - line[0], samp[1] - samp[0]), np.hypot(line[2] - line[0], samp[2] - samp[0]))
    return 1.0 / per_m


def splat_view(scene: Scene, cam: RpcCamera, out_size: tuple[int, int], supersample: int | None = None) -> _Splat:
    """Project surface samples and keep the highest sample per pixel.

    ``supersample`` defaults to at least two samples per image pixel along
    each axis.
    """
    rows, cols = out_size
    if supersample is None:
        supersample = max(2, int(math.ceil(2.0 * scene.gsd / _image_gsd(cam, scene) - 1e-9)))
    x, y, z, r, c, wall = _surface_samples(scene, _view_azimuth(cam, scene), supersample)
    line, samp = cam.project(x, y, z, check=False)
    li = np.rint(line).astype(np.int64)
    si = np.rint(samp).astype(np.int64)
    inside = (li >= 0) & (li < rows) & (si >= 0) & (si < cols) & np.isfinite(line) & np.isfinite(samp)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        raise DataError("scene does not project into the requested image")
    pix = li[idx] * cols + si[idx]
    # z-buffer on 5 cm height bins; among equal heights the sample nearest
    # the pixel center wins, which keeps flat surfaces free of splat bias
    zbin = np.round(z[idx] / Z_BUFFER_BIN)
    off = (line[idx] - li[idx]) ** 2 + (samp[idx] - si[idx]) ** 2
    # sort by pixel, height bin, then closeness: the last entry per pixel wins
    order = np.lexsort((-off, zbin, pix))
    pix_sorted = pix[order]
    last = np.r_[pix_sorted[1:] != pix_sorted[:-1], True]
    winner = np.full(rows * cols, -1, dtype=np.int64)
    winner[pix_sorted[last]] = idx[order][last]
    winner = winner.reshape(rows, cols)
    # move each winning top sample within its height plane onto the pixel center ray
    px = np.full(out_size, np.nan)
    py = np.full(out_size, np.nan)
    hit = winner >= 0
    w = winner[hit]
    pl, ps = np.nonzero(hit)
    d = _ground_jacobian_inv(cam, scene) @ np.stack([pl - line[w], ps - samp[w]])
    top = ~wall[w]
    px[hit] = np.where(top, x[w] + d[0], x[w])
    py[hit] = np.where(top, y[w] + d[1], y[w])
    return _Splat((rows, cols), winner, x, y, z, r, c, wall, px, py)


def _fill_nearest(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    if valid.all():
        return values
    _, (ir, ic) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return values[ir, ic]


def render_view(
    scene: Scene,
    cam: RpcCamera,
    season: SeasonParams | None = None,
    out_size: tuple[int, int] = (512, 512),
    view_seed: int = 0,
    splat: _Splat | None = None,
) -> np.ndarray:
    """Render a single-band image of the (season-perturbed) scene.

    Intensity is texture x season albedo x shadow darkening, plus seeded
    Gaussian noise, clipped to [0, 1]. Pixels no sample reaches take the
    nearest rendered value.
    """
    season = season or SeasonParams()
    observed = apply_season(scene, season)
    if splat is None:
        splat = splat_view(observed, cam, out_size)
    shadow = cast_shadows(observed.dsm, season.sun_azimuth, season.sun_elevation)
    win = splat.winner
    hit = win >= 0
    if not hit.any():
        raise DataError("empty coverage: no surface sample reaches the image")
    w = win[hit]
    r, c = splat.r[w], splat.c[w]
    value = observed.texture[r, c].copy()
    # top surfaces sample the texture bilinearly at the pixel center
    top = ~splat.wall[w]
    tr, tc = observed.dsm.world_to_cell(splat.px[hit][top], splat.py[hit][top])
    value[top] = ndimage.map_coordinates(observed.texture, [tr, tc], order=1, mode="nearest")
    value[shadow[r, c]] *= SHADOW_FACTOR
    value[splat.wall[w]] *= WALL_FACTOR
    img = np.zeros(out_size)
    img[hit] = value
    img = _fill_nearest(img, hit)
    if season.noise_sigma > 0:
        rng = np.random.default_rng([scene.seed, season.seed, view_seed, 11])
        img = img + rng.normal(0.0, season.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def render_truth(
    scene: Scene,
    cam: RpcCamera,
    out_size: tuple[int, int] = (512, 512),
    water_nodata: bool = True,
    splat: _Splat | None = None,
):
    """Per-pixel truth for an unrectified view of the lidar-date scene.

    Returns:
        xyz: (rows, cols, 3) world points, NaN where nothing is seen (and on
            water when ``water_nodata``, mirroring absent lidar returns).
        classes: (rows, cols) uint8 class codes, UNLABELED where nothing is seen.
        ndsm: (rows, cols) height above terrain.
    """
    if splat is None:
        splat = splat_view(scene, cam, out_size)
    win = splat.winner
    hit = win >= 0
    w = win[hit]
    xyz = np.full((*out_size, 3), np.nan)
    xyz[hit, 0] = splat.px[hit]
    xyz[hit, 1] = splat.py[hit]
    xyz[hit, 2] = splat.z[w]
    classes = np.full(out_size, UNLABELED, dtype=np.uint8)
    classes[hit] = scene.classes[splat.r[w], splat.c[w]]
    ndsm = np.full(out_size, np.nan)
    ndsm[hit] = splat.z[w] - scene.dtm.heights[splat.r[w], splat.c[w]]
    if water_nodata:
        xyz[classes == WATER] = np.nan
    return xyz, classes, ndsm
