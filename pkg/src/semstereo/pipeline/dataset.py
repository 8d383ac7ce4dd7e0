"""Synthetic dataset materialization in the on-disk layout.

Layout::

    <root>/dataset.json           scene and view description
    <root>/tiles/<tile_id>/       image, rpc.txt, xyz, class, ndsm, tile.json
    <root>/truth/dsm(.bin,_class) lidar-date surface on the scene grid
    <root>/truth/points.txt       cell-center truth points plus .labels
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from semstereo import synthdata as sd
from semstereo.classes import ClassCode
from semstereo.errors import ArgumentError, DataError
from semstereo.pipeline.io import (
    TileBundle,
    dump_json,
    load_json,
    read_height_field,
    save_tile,
    write_height_field,
    write_points,
)
from semstereo.rasters import HeightField

WATER = int(ClassCode.WATER)

# a nadir-ish reference plus four obliques around the compass
DEFAULT_VIEWS = ((0.0, 3.0), (45.0, 20.0), (135.0, 22.0), (225.0, 20.0), (315.0, 24.0))
DEFAULT_COMPOSITION = {"building": 0.10, "tree": 0.02, "water": 0.03}


@dataclass(frozen=True)
class SynthSpec:
    """Everything that determines a synthetic dataset.

    Attributes:
        seed: scene seed.
        image_size: rendered tile size in pixels (square).
        image_gsd: tile ground sample distance in meters.
        scene_gsd: scene grid cell size in meters (the truth DSM grid).
        views: (azimuth, off_nadir) per tile, degrees.
        dates: collection date per tile; defaults to one month apart.
        seasons: per-tile season overrides, keyed by tile index.
        composition: target class fractions.
        building_heights, tree_heights: height ranges in meters.
        cubic_jitter: RPC cubic-term jitter.
        noise_sigma: image noise for tiles without a season override.
    """

    seed: int = 7
    image_size: int = 512
    image_gsd: float = 0.5
    scene_gsd: float = 1.0
    views: tuple[tuple[float, float], ...] = DEFAULT_VIEWS
    dates: tuple[str, ...] | None = None
    seasons: dict[int, dict] = field(default_factory=dict)
    composition: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_COMPOSITION))
    building_heights: tuple[float, float] = (4.0, 15.0)
    tree_heights: tuple[float, float] = (4.0, 10.0)
    cubic_jitter: float = 1e-3
    noise_sigma: float = 2.0 / 255.0

    def __post_init__(self):
        if len(self.views) < 1:
            raise ArgumentError("at least one view is required")
        if self.dates is not None and len(self.dates) != len(self.views):
            raise ArgumentError("one date per view is required")
        object.__setattr__(self, "views", tuple((float(a), float(o)) for a, o in self.views))
        object.__setattr__(self, "seasons", {int(k): dict(v) for k, v in self.seasons.items()})

    def date(self, k: int) -> str:
        if self.dates is not None:
            return self.dates[k]
        return f"2016-{1 + k % 12:02d}-15"

    def season(self, k: int) -> sd.SeasonParams:
        kw = {"noise_sigma": self.noise_sigma, "seed": k}
        kw.update(self.seasons.get(k, {}))
        return sd.SeasonParams(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["views"] = [list(v) for v in self.views]
        d["seasons"] = {str(k): v for k, v in sorted(self.seasons.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["views"] = tuple(tuple(v) for v in d.get("views", DEFAULT_VIEWS))
        if d.get("dates") is not None:
            d["dates"] = tuple(d["dates"])
        for k in ("building_heights", "tree_heights"):
            if k in d:
                d[k] = tuple(d[k])
        d["seasons"] = {int(k): v for k, v in d.get("seasons", {}).items()}
        return cls(**d)


def scene_for(spec: SynthSpec) -> sd.Scene:
    cells = int(round(spec.image_size * spec.image_gsd / spec.scene_gsd))
    return sd.gen_scene(
        spec.seed,
        size=(cells, cells),
        gsd=spec.scene_gsd,
        composition=spec.composition,
        building_heights=spec.building_heights,
        tree_heights=spec.tree_heights,
    )


def synth_tiles(spec: SynthSpec, scene: sd.Scene | None = None) -> list[TileBundle]:
    """Render every view of the spec as a tile bundle with projected truth."""
    scene = scene or scene_for(spec)
    size = (spec.image_size, spec.image_size)
    tiles = []
    for k, (az, off) in enumerate(spec.views):
        _, cam = sd.view_camera(
            scene, sd.ViewSpec(az, off), size, gsd=spec.image_gsd, seed=spec.seed * 100 + k, cubic_jitter=spec.cubic_jitter
        )
        truth_splat = sd.splat_view(scene, cam, size)
        season = spec.season(k)
        observed = sd.apply_season(scene, season)
        same_geometry = np.array_equal(observed.dsm.heights, scene.dsm.heights, equal_nan=True)
        img_splat = truth_splat if same_geometry else None
        image = sd.render_view(scene, cam, season, size, view_seed=k, splat=img_splat)
        xyz, classes, ndsm = sd.render_truth(scene, cam, size, splat=truth_splat)
        tiles.append(TileBundle(f"t{k:02d}", image, cam, spec.date(k), spec.image_gsd, xyz, classes, ndsm, az, off))
    return tiles


def truth_dsm(scene: sd.Scene) -> HeightField:
    """Lidar-date surface with water heights removed (labels kept)."""
    h = np.where(scene.classes == WATER, np.nan, scene.dsm.heights)
    return HeightField(scene.dsm.origin, scene.gsd, h, scene.classes.copy())


def write_synth_dataset(root: str | Path, spec: SynthSpec) -> Path:
    """Generate and write a complete synthetic dataset; returns ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    scene = scene_for(spec)
    for tile in synth_tiles(spec, scene):
        save_tile(tile, root / "tiles")
    truth = truth_dsm(scene)
    (root / "truth").mkdir(exist_ok=True)
    write_height_field(root / "truth" / "dsm", truth)
    x, y = truth.cell_centers()
    xyz = np.c_[x.ravel(), y.ravel(), scene.dsm.heights.ravel()]
    write_points(root / "truth" / "points.txt", xyz, scene.classes.ravel())
    dump_json({"kind": "synthetic", "spec": spec.to_dict(), "cell": "synthetic"}, root / "dataset.json")
    return root


def load_truth_dsm(root: str | Path) -> HeightField | None:
    p = Path(root) / "truth" / "dsm.bin"
    return read_height_field(p) if p.exists() else None


def load_spec(root: str | Path) -> SynthSpec:
    meta = load_json(Path(root) / "dataset.json")
    if "spec" not in meta:
        raise DataError(f"{root} is not a synthetic dataset")
    return SynthSpec.from_dict(meta["spec"])
