"""On-disk formats: raw rasters with text headers, point clouds, tile and
rectified-pair bundles.

Float rasters are little-endian float32, band-sequential, with a JSON
header holding dimensions, nodata, a six-parameter affine geotransform and
(for class rasters) the class-code table. The nodata value of float
rasters is a quiet NaN declared in the header.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from semstereo.classes import CLASS_CODES, ClassCode
from semstereo.errors import ArgumentError, DataError
from semstereo.geometry import RpcCamera
from semstereo.rasters import DisparityMap, HeightField
from semstereo.rectification import Homography, RectifiedPair

FLOAT_NODATA = "nan"
CLASS_NODATA = int(ClassCode.UNLABELED)
IDENTITY_TRANSFORM = (0.0, 1.0, 0.0, 0.0, 0.0, -1.0)


def _header_path(path: Path) -> Path:
    return path.with_suffix(".hdr")


def dump_json(obj, path: str | Path) -> None:
    """Write canonical JSON (sorted keys, NaN as null) so reruns are byte-identical."""
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def load_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"missing file {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON in {path}: {exc}") from exc


def _plain(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, (np.floating, np.integer)):
        return _plain(obj.item())
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# rasters


def write_raster(path: str | Path, array: np.ndarray, transform=None, kind: str | None = None) -> Path:
    """Write a raster as ``<path>.bin`` plus ``<path>.hdr``.

    2-D arrays are single band; 3-D arrays of shape (rows, cols, bands) are
    stored band-sequential. Integer arrays are written as 8-bit class
    rasters, everything else as float32 with NaN nodata.
    """
    path = Path(path).with_suffix(".bin")
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ArgumentError("rasters must be 2-D or (rows, cols, bands)")
    rows, cols, bands = a.shape
    is_class = kind == "class" or (kind is None and np.issubdtype(a.dtype, np.integer))
    header = {
        "rows": rows,
        "cols": cols,
        "bands": bands,
        "byte_order": "little",
        "interleave": "bsq",
        "transform": list(transform or IDENTITY_TRANSFORM),
    }
    if is_class:
        if a.size and (a.min() < 0 or a.max() > 255):
            raise ArgumentError("class rasters must hold codes in 0..255")
        data = np.ascontiguousarray(np.moveaxis(a, 2, 0), dtype="u1")
        header.update(dtype="uint8", nodata=CLASS_NODATA, classes={c.name: int(c) for c in ClassCode})
    else:
        data = np.ascontiguousarray(np.moveaxis(a, 2, 0), dtype="<f4")
        header.update(dtype="float32", nodata=FLOAT_NODATA)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data.tobytes())
    dump_json(header, _header_path(path))
    return path


def read_raster(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read a raster written by :func:`write_raster`.

    Returns the array (2-D for one band, else (rows, cols, bands)) and the
    header. Float rasters come back as float64 with NaN at nodata.
    """
    path = Path(path).with_suffix(".bin")
    header = load_json(_header_path(path))
    rows, cols, bands = int(header["rows"]), int(header["cols"]), int(header["bands"])
    dtype = {"uint8": "u1", "float32": "<f4"}.get(header.get("dtype"))
    if dtype is None:
        raise DataError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    try:
        raw = np.frombuffer(path.read_bytes(), dtype=dtype)
    except FileNotFoundError as exc:
        raise DataError(f"missing raster {path}") from exc
    if raw.size != rows * cols * bands:
        raise DataError(f"{path}: {raw.size} values, header declares {rows}x{cols}x{bands}")
    a = np.moveaxis(raw.reshape(bands, rows, cols), 0, 2)
    if dtype == "u1":
        table = header.get("classes", {})
        unknown = set(np.unique(a).tolist()) - set(table.values()) - set(CLASS_CODES.values())
        if unknown:
            raise DataError(f"{path}: class codes {sorted(unknown)} are not in the header table")
        a = a.astype(np.uint8)
    else:
        a = a.astype(np.float64)
        nd = header.get("nodata")
        if nd not in (None, FLOAT_NODATA):
            a[a == float(nd)] = np.nan
    return (a[..., 0] if bands == 1 else a), header


def write_disparity(path: str | Path, disp: DisparityMap) -> Path:
    p = write_raster(path, disp.values, kind="float")
    header = load_json(_header_path(p))
    header.update(d_min=disp.d_min, d_max=disp.d_max, convention="right_col = left_col + d")
    dump_json(header, _header_path(p))
    return p


def read_disparity(path: str | Path) -> DisparityMap:
    values, header = read_raster(path)
    if values.ndim != 2:
        raise DataError(f"{path}: disparity must be single band")
    if header.get("d_min") is None or header.get("d_max") is None:
        return DisparityMap.from_truth(values)
    return DisparityMap(values, float(header["d_min"]), float(header["d_max"]))


def height_transform(h: HeightField) -> tuple[float, ...]:
    x0, y0 = h.origin
    return (x0, h.cell_size, 0.0, y0, 0.0, -h.cell_size)


def write_height_field(path: str | Path, h: HeightField) -> None:
    """Heights to ``<path>.bin`` and classes (when present) to ``<path>_class.bin``."""
    path = Path(path)
    write_raster(path, h.heights, height_transform(h), kind="float")
    if h.classes is not None:
        write_raster(path.with_name(path.stem + "_class"), h.classes, height_transform(h), kind="class")


def read_height_field(path: str | Path) -> HeightField:
    path = Path(path).with_suffix("")
    heights, header = read_raster(path)
    x0, dx, _, y0, _, dy = header["transform"]
    if abs(dx + dy) > 1e-12 or dx <= 0:
        raise DataError(f"{path}: height fields need square north-up cells")
    cls_path = path.with_name(path.name + "_class")
    classes = read_raster(cls_path)[0] if cls_path.with_suffix(".bin").exists() else None
    return HeightField((x0, y0), dx, heights, classes)


# ---------------------------------------------------------------------------
# point clouds


def write_points(path: str | Path, xyz: np.ndarray, labels: np.ndarray | None = None) -> None:
    """One "x y z" line per point, plus a parallel ``.labels`` file."""
    path = Path(path)
    xyz = np.asarray(xyz, float).reshape(-1, 3)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, xyz, fmt="%.6f")
    if labels is not None:
        labels = np.asarray(labels).ravel()
        if labels.size != xyz.shape[0]:
            raise ArgumentError("one label per point is required")
        np.savetxt(path.with_suffix(".labels"), labels, fmt="%d")


def read_points(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing point file {path}")
    xyz = np.loadtxt(path, ndmin=2)
    if xyz.size == 0:
        xyz = np.empty((0, 3))
    if xyz.shape[1] != 3:
        raise DataError(f"{path}: expected 'x y z' per line")
    lab_path = path.with_suffix(".labels")
    labels = read_labels(lab_path) if lab_path.exists() else None
    if labels is not None and labels.size != xyz.shape[0]:
        raise DataError(f"{lab_path}: {labels.size} labels for {xyz.shape[0]} points")
    return xyz, labels


def read_labels(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing label file {path}")
    return np.atleast_1d(np.loadtxt(path, dtype=np.int64, ndmin=1))


# ---------------------------------------------------------------------------
# bundles


@dataclass(frozen=True, eq=False)
class TileBundle:
    """One image tile with its sensor model and optional projected truth."""

    tile_id: str
    image: np.ndarray
    rpc: RpcCamera
    date: str
    gsd: float
    xyz: np.ndarray | None = None
    classes: np.ndarray | None = None
    ndsm: np.ndarray | None = None
    azimuth: float = math.nan
    off_nadir: float = math.nan

    def __post_init__(self):
        shape = np.shape(self.image)
        if len(shape) != 2:
            raise ArgumentError("tile image must be single band")
        for name in ("xyz", "classes", "ndsm"):
            r = getattr(self, name)
            if r is not None and np.shape(r)[:2] != shape:
                raise ArgumentError(f"tile {self.tile_id}: {name} raster differs in size from the image")

    @property
    def shape(self) -> tuple[int, int]:
        return np.shape(self.image)

    @property
    def has_truth(self) -> bool:
        return self.xyz is not None


def save_tile(tile: TileBundle, directory: str | Path) -> Path:
    d = Path(directory) / tile.tile_id
    d.mkdir(parents=True, exist_ok=True)
    write_raster(d / "image", tile.image, kind="float")
    tile.rpc.save(d / "rpc.txt")
    if tile.xyz is not None:
        write_raster(d / "xyz", tile.xyz, kind="float")
    if tile.classes is not None:
        write_raster(d / "class", tile.classes, kind="class")
    if tile.ndsm is not None:
        write_raster(d / "ndsm", tile.ndsm, kind="float")
    meta = {
        "tile_id": tile.tile_id,
        "date": tile.date,
        "gsd": tile.gsd,
        "azimuth": tile.azimuth,
        "off_nadir": tile.off_nadir,
    }
    dump_json(meta, d / "tile.json")
    return d


def load_tile(directory: str | Path) -> TileBundle:
    d = Path(directory)
    meta = load_json(d / "tile.json")
    image, _ = read_raster(d / "image")
    try:
        rpc = RpcCamera.load(d / "rpc.txt")
    except FileNotFoundError as exc:
        raise DataError(f"missing RPC file in {d}") from exc

    def optional(name):
        return read_raster(d / name)[0] if (d / f"{name}.bin").exists() else None

    nan = math.nan
    return TileBundle(
        meta["tile_id"],
        image,
        rpc,
        meta.get("date", ""),
        float(meta.get("gsd", nan)),
        optional("xyz"),
        optional("class"),
        optional("ndsm"),
        float(meta.get("azimuth") if meta.get("azimuth") is not None else nan),
        float(meta.get("off_nadir") if meta.get("off_nadir") is not None else nan),
    )


def load_tiles(dataset: str | Path) -> list[TileBundle]:
    """Every tile under ``<dataset>/tiles``, sorted by id; ids must be unique."""
    root = Path(dataset) / "tiles"
    if not root.is_dir():
        raise DataError(f"{dataset} has no tiles directory")
    tiles = [load_tile(p) for p in sorted(root.iterdir()) if (p / "tile.json").exists()]
    ids = [t.tile_id for t in tiles]
    if len(set(ids)) != len(ids):
        raise DataError("tile ids must be unique within a dataset")
    return tiles


def save_pair(pair: RectifiedPair, directory: str | Path, extra: dict | None = None) -> Path:
    """Write a rectified pair bundle: rasters, both RPCs and ``pair.json``."""
    d = Path(directory) / pair.pair_id
    d.mkdir(parents=True, exist_ok=True)
    write_raster(d / "left", pair.left_image, kind="float")
    write_raster(d / "right", pair.right_image, kind="float")
    pair.cam_left.save(d / "left_rpc.txt")
    pair.cam_right.save(d / "right_rpc.txt")
    if pair.truth_disparity is not None:
        write_disparity(d / "truth_disparity", pair.truth_disparity)
    if pair.truth_class_left is not None:
        write_raster(d / "class_left", pair.truth_class_left, kind="class")
    if pair.truth_class_right is not None:
        write_raster(d / "class_right", pair.truth_class_right, kind="class")
    meta = {
        "pair_id": pair.pair_id,
        "h_left": pair.h_left.to_list(),
        "h_right": pair.h_right.to_list(),
        "y_parallax_rms": pair.y_parallax_rms,
        "y_parallax_max": pair.y_parallax_max,
        "left_date": pair.left_date,
        "right_date": pair.right_date,
        "z_ref": pair.z_ref,
    }
    meta.update(extra or {})
    dump_json(meta, d / "pair.json")
    return d


def load_pair(directory: str | Path) -> tuple[RectifiedPair, dict]:
    d = Path(directory)
    meta = load_json(d / "pair.json")
    left, _ = read_raster(d / "left")
    right, _ = read_raster(d / "right")

    def optional(name, reader):
        return reader(d / name) if (d / f"{name}.bin").exists() else None

    pair = RectifiedPair(
        left_image=left,
        right_image=right,
        h_left=Homography(np.reshape(meta["h_left"], (3, 3))),
        h_right=Homography(np.reshape(meta["h_right"], (3, 3))),
        cam_left=RpcCamera.load(d / "left_rpc.txt"),
        cam_right=RpcCamera.load(d / "right_rpc.txt"),
        truth_disparity=optional("truth_disparity", read_disparity),
        truth_class_left=optional("class_left", lambda p: read_raster(p)[0]),
        truth_class_right=optional("class_right", lambda p: read_raster(p)[0]),
        y_parallax_rms=float(meta.get("y_parallax_rms") or 0.0),
        y_parallax_max=float(meta.get("y_parallax_max") or 0.0),
        left_date=meta.get("left_date", ""),
        right_date=meta.get("right_date", ""),
        pair_id=meta["pair_id"],
        z_ref=float(meta.get("z_ref") or 0.0),
    )
    return pair, meta


def list_pairs(directory: str | Path) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"no pair directory at {root}")
    return [p for p in sorted(root.iterdir()) if (p / "pair.json").exists()]
