"""Pair selection, rectification and the pairwise / multi-view benchmark runs."""

from __future__ import annotations

import itertools
import logging
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy

import semstereo
from semstereo.classes import ClassCode
from semstereo.errors import ArgumentError, DataError, SemStereoError
from semstereo.fusion import disparity_to_labeled_points, empty_grid, fuse_multiview, rasterize_heights
from semstereo.geometry import (
    RpcCamera,
    WorldPoint,
    fit_projection_matrix,
    intersection_angle,
    rpc_ground_intersect,
    view_direction,
)
from semstereo.matcher import sgm_match
from semstereo.metrics import (
    MetricsReport,
    combined_miou,
    combined_miou_3d,
    disparity_metrics,
    pair_filter,
    segmentation_metrics,
    z_metrics,
)
from semstereo.pipeline.config import RunConfig
from semstereo.pipeline.io import (
    TileBundle,
    dump_json,
    file_digest,
    list_pairs,
    load_json,
    load_pair,
    read_disparity,
    read_raster,
    save_pair,
    write_disparity,
    write_height_field,
)
from semstereo.rasters import DisparityMap, HeightField
from semstereo.rectification import Rectification, RectifiedPair, rectify_pair, reproject_truth, tile_world_box
from semstereo.registration import estimate_3d_translation

logger = logging.getLogger(__name__)

UNLABELED = int(ClassCode.UNLABELED)
Z_PAD = 20.0
SEARCH_PAD = 4


# ---------------------------------------------------------------------------
# tile geometry


def tile_center(tile: TileBundle) -> WorldPoint:
    """Ground point under the tile center, at the median truth height if known."""
    rows, cols = tile.shape
    h = tile.rpc.h_off
    if tile.xyz is not None and np.isfinite(tile.xyz[..., 2]).any():
        h = float(np.nanmedian(tile.xyz[..., 2]))
    return rpc_ground_intersect(tile.rpc, ((rows - 1) / 2.0, (cols - 1) / 2.0), h)


def off_nadir_deg(cam: RpcCamera, p: WorldPoint) -> float:
    v = view_direction(cam, p)
    return float(np.degrees(np.arccos(np.clip(abs(v[2]), 0.0, 1.0))))


def height_bounds(tile: TileBundle, pad: float = Z_PAD) -> tuple[float, float]:
    """Height search interval: truth extent plus padding, else the RPC height range."""
    if tile.xyz is not None and np.isfinite(tile.xyz[..., 2]).any():
        z = tile.xyz[..., 2]
        return float(np.nanmin(z)) - pad, float(np.nanmax(z)) + pad
    return tile.rpc.h_off - 0.5 * abs(tile.rpc.h_scale), tile.rpc.h_off + 0.5 * abs(tile.rpc.h_scale)


def months_apart(a: str, b: str) -> int:
    try:
        da, db = date.fromisoformat(a), date.fromisoformat(b)
    except ValueError as exc:
        raise DataError(f"collection dates must be ISO formatted: {a!r}, {b!r}") from exc
    return abs((da.year - db.year) * 12 + da.month - db.month)


def pair_id(left: str, right: str) -> str:
    return f"{left}__{right}"


# ---------------------------------------------------------------------------
# rectification


def rectify_tiles(left: TileBundle, right: TileBundle, with_truth: bool = True) -> tuple[RectifiedPair, dict]:
    """Rectify two tiles; returns the pair and metadata for ``pair.json``."""
    if left.shape != right.shape:
        raise DataError(f"tiles {left.tile_id} and {right.tile_id} differ in size")
    zmin, zmax = height_bounds(left)
    truth = with_truth and left.has_truth
    pair = rectify_pair(
        left.image,
        right.image,
        left.rpc,
        right.rpc,
        zmin,
        zmax,
        xyz_left=left.xyz if truth else None,
        class_left=left.classes if truth else None,
        class_right=right.classes if truth and right.classes is not None else None,
        left_date=left.date,
        right_date=right.date,
        pair_id=pair_id(left.tile_id, right.tile_id),
    )
    lo, hi = disparity_search_range(pair, zmin, zmax)
    meta = {
        "left_tile": left.tile_id,
        "right_tile": right.tile_id,
        "zmin": zmin,
        "zmax": zmax,
        "tile_shape": list(left.shape),
        "search_range": [lo, hi],
    }
    return pair, meta


def _rectification_of(pair: RectifiedPair) -> Rectification:
    return Rectification(
        pair.h_left, pair.h_right, tuple(pair.shape), pair.z_ref, pair.y_parallax_rms, pair.y_parallax_max
    )


def disparity_search_range(pair: RectifiedPair, zmin: float, zmax: float, pad: int = SEARCH_PAD) -> tuple[int, int]:
    """Integer disparity interval spanned by the tile footprint between two heights."""
    box = tile_world_box(pair.cam_left, pair.shape, zmin, zmax)
    xs = np.linspace(box.xmin, box.xmax, 5)
    ys = np.linspace(box.ymin, box.ymax, 5)
    zs = np.array([zmin, zmax])
    X = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    _, cl, _, cr = reproject_truth(pair.cam_left, pair.cam_right, _rectification_of(pair), X)
    d = cr - cl
    return int(math.floor(np.nanmin(d))) - pad, int(math.ceil(np.nanmax(d))) + pad


def truth_for_pair(pair: RectifiedPair, left: TileBundle, right: TileBundle) -> RectifiedPair:
    """Recompute truth disparity and class rasters from the stored transforms."""
    from semstereo.rectification import make_truth_disparity, warp_image

    if not left.has_truth:
        raise DataError(f"tile {left.tile_id} carries no truth xyz")
    rect = _rectification_of(pair)
    truth, _ = make_truth_disparity(pair.cam_left, pair.cam_right, rect, left.xyz)
    cl = warp_image(left.classes, pair.h_left, pair.shape) if left.classes is not None else None
    cr = warp_image(right.classes, pair.h_right, pair.shape) if right.classes is not None else None
    return replace(pair, truth_disparity=truth, truth_class_left=cl, truth_class_right=cr)


# ---------------------------------------------------------------------------
# matching


def match_pair(
    pair: RectifiedPair,
    meta: dict,
    config: RunConfig,
    prior: bool,
    fill_invalid: bool | None = None,
    labels: tuple[np.ndarray, np.ndarray] | None = None,
) -> DisparityMap:
    """SGM over the pair's search range, optionally with the semantic prior.

    The prior reads ``labels`` (left, right) when given, else the pair's
    class rasters; without any it is skipped.
    """
    lo, hi = meta.get("search_range") or (None, None)
    if lo is None:
        t = pair.truth_disparity
        if t is None:
            raise DataError(f"pair {pair.pair_id} has neither a search range nor truth")
        lo, hi = int(math.floor(t.d_min)) - 16, int(math.ceil(t.d_max)) + 16
    params = config.matcher
    if fill_invalid is not None:
        params = replace(params, fill_invalid=fill_invalid)
    cl, cr = labels if labels is not None else (pair.truth_class_left, pair.truth_class_right)
    if prior and cl is not None and cr is not None:
        return sgm_match(
            pair.left_image, pair.right_image, lo, hi, params, config.prior.params(), class_left=cl, class_right=cr
        )
    return sgm_match(pair.left_image, pair.right_image, lo, hi, params)


# ---------------------------------------------------------------------------
# pair selection


@dataclass
class Selection:
    """Outcome of pair selection: kept ids in order plus a reason per rejection."""

    kept: list[str] = field(default_factory=list)
    rejected: dict[str, str] = field(default_factory=dict)
    angles: dict[str, float] = field(default_factory=dict)
    epe: dict[str, float] = field(default_factory=dict)

    def summary(self) -> str:
        if self.kept:
            return f"{len(self.kept)} pair(s) kept, {len(self.rejected)} rejected"
        reasons = sorted(set(r.split(":")[0] for r in self.rejected.values()))
        return "no pair survived selection (" + ", ".join(reasons) + ")" if reasons else "no candidate pairs"

    def to_dict(self) -> dict:
        return {"kept": self.kept, "rejected": self.rejected, "angles": self.angles, "epe": self.epe}


def ordered_pair(a: TileBundle, b: TileBundle) -> tuple[TileBundle, TileBundle]:
    """Put the view closer to nadir on the left (ties by tile id)."""
    p = tile_center(a)
    ka = (round(off_nadir_deg(a.rpc, p), 6), a.tile_id)
    kb = (round(off_nadir_deg(b.rpc, p), 6), b.tile_id)
    return (a, b) if ka <= kb else (b, a)


def _filter_epe_task(args):
    left, right, config = args
    pair, meta = rectify_tiles(left, right)
    if pair.truth_disparity is None:
        return pair.pair_id, math.nan
    disp = match_pair(pair, meta, config, prior=False, fill_invalid=True)
    return pair.pair_id, disparity_metrics(disp, pair.truth_disparity, config.metrics.disparity_thresh).epe


def select_pairs(tiles: Sequence[TileBundle], config: RunConfig, run_filter: bool = True) -> Selection:
    """Candidate pairs filtered by date gap, intersection angle and matcher EPE.

    The EPE stage runs only when the left tile carries truth; pairs without
    truth skip it. Output order follows sorted tile ids.
    """
    if len(tiles) < 2:
        raise ArgumentError("pair selection needs at least two tiles")
    sel = Selection()
    cfg = config.selection
    staged = []
    for a, b in itertools.combinations(sorted(tiles, key=lambda t: t.tile_id), 2):
        left, right = ordered_pair(a, b)
        pid = pair_id(left.tile_id, right.tile_id)
        gap = months_apart(left.date, right.date)
        if gap > cfg.max_month_diff:
            sel.rejected[pid] = f"date: {gap} months apart"
            continue
        ang = intersection_angle(left.rpc, right.rpc, tile_center(left))
        sel.angles[pid] = ang
        if not cfg.min_angle_deg <= ang <= cfg.max_angle_deg:
            sel.rejected[pid] = f"angle: {ang:.2f} deg outside [{cfg.min_angle_deg}, {cfg.max_angle_deg}]"
            continue
        staged.append((pid, left, right))
    with_truth = [(pid, l, r) for pid, l, r in staged if l.has_truth] if run_filter else []
    epes = dict(_map(_filter_epe_task, [(l, r, config) for _, l, r in with_truth], config.workers))
    sel.epe.update({k: v for k, v in epes.items() if math.isfinite(v)})
    kept_ids, rejected = pair_filter([(pid, epes[pid]) for pid, _, _ in with_truth], cfg.epe_thresh)
    bad = {pid for pid, _ in rejected}
    for pid, _, _ in staged:
        if pid in bad:
            sel.rejected[pid] = f"epe: {epes[pid]:.2f} px above {cfg.epe_thresh}"
        else:
            sel.kept.append(pid)
    return sel


def _map(fn: Callable, items: list, workers: int) -> list:
    """Ordered map; results do not depend on the worker count."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# pairwise benchmark


def _score_pairwise(disp: DisparityMap, pair: RectifiedPair, labels: np.ndarray | None, config: RunConfig, prefix: str, report: MetricsReport):
    th = config.metrics.disparity_thresh
    truth = pair.truth_disparity
    report.add(prefix, disparity_metrics(disp, truth, th))
    if labels is None or pair.truth_class_left is None:
        return
    report.add(prefix, segmentation_metrics(labels, pair.truth_class_left))
    err = np.abs(disp.values - truth.values)
    err = np.where(truth.valid, np.where(np.isfinite(err), err, np.inf), np.nan)
    report.add(prefix + "combined_", combined_miou(labels, err, pair.truth_class_left, "2D", th))


def _pairwise_task(args):
    pair_dir, config, out_dir, pred_dir, label_dir = args
    pair, meta = load_pair(pair_dir)
    pid = pair.pair_id
    out = Path(out_dir) / "pairs" / pid
    out.mkdir(parents=True, exist_ok=True)
    labels = None
    if label_dir is not None and (Path(label_dir) / pid / "labels.bin").exists():
        labels = read_raster(Path(label_dir) / pid / "labels")[0]
    elif pair.truth_class_left is not None:
        labels = pair.truth_class_left
    variants = {}
    if pred_dir is not None:
        variants["pred"] = read_disparity(Path(pred_dir) / pid / "disparity")
    else:
        prior_labels = None
        if labels is not None and label_dir is not None and (Path(label_dir) / pid / "labels_right.bin").exists():
            prior_labels = (labels, read_raster(Path(label_dir) / pid / "labels_right")[0])
        if not config.prior.enabled or config.prior.compare:
            variants["sgm"] = match_pair(pair, meta, config, prior=False)
        if config.prior.enabled:
            variants["sgm_prior"] = match_pair(pair, meta, config, prior=True, labels=prior_labels)
        for name, d in variants.items():
            write_disparity(out / name, d)
    report = MetricsReport("pairwise", label=pid, params={"status": "scored"})
    if pair.truth_disparity is None:
        report.params["status"] = "skipped: no truth disparity"
    else:
        for name, d in variants.items():
            _score_pairwise(d, pair, labels, config, f"{name}.", report)
    report.params["label_source"] = "predicted" if label_dir is not None else "truth"
    (out / "report.json").write_text(report.to_json())
    return report


def aggregate(reports: Sequence[MetricsReport], task: str, label: str = "mean") -> MetricsReport:
    """Mean of every value over the reports that carry it."""
    keys = sorted({k for r in reports for k in r.values})
    values = {}
    for k in keys:
        vals = [r.values[k] for r in reports if k in r.values and math.isfinite(r.values[k])]
        values[k] = float(np.mean(vals)) if vals else math.nan
    return MetricsReport(task, values, {"pairs": len(reports)}, {}, label)


def run_pairwise_benchmark(
    pairs_dir: str | Path,
    config: RunConfig,
    out_dir: str | Path | None = None,
    pred_dir: str | Path | None = None,
    label_dir: str | Path | None = None,
) -> list[MetricsReport]:
    """Match and score every rectified pair; returns per-pair reports plus the mean.

    With ``pred_dir`` the disparities in ``<pred_dir>/<pair_id>/disparity``
    are scored instead of running the matcher. Labels for mIoU come from
    ``<label_dir>/<pair_id>/labels`` when given, else the pair's class
    raster stands in as an oracle labeler.
    """
    out_dir = Path(out_dir or config.output_dir)
    dirs = list_pairs(pairs_dir)
    if not dirs:
        raise DataError(f"no rectified pairs under {pairs_dir}")
    tasks = [(d, config, out_dir, pred_dir, label_dir) for d in dirs]
    reports = _map(_pairwise_task, tasks, config.workers)
    scored = [r for r in reports if r.params.get("status") == "scored"]
    mean = aggregate(scored, "pairwise")
    all_reports = list(reports) + [mean]
    dump_json([r.to_dict() for r in all_reports], out_dir / "pairwise_reports.json")
    cols = [k for k in ("sgm.epe", "sgm.d1", "sgm_prior.epe", "sgm_prior.d1", "pred.epe", "pred.d1") if k in mean.values]
    cols += [k for k in mean.values if k.endswith("miou") and k not in cols]
    from semstereo.metrics import render_table

    (out_dir / "pairwise_table.txt").write_text(render_table(all_reports, cols))
    return all_reports


# ---------------------------------------------------------------------------
# multi-view benchmark


def scoring_grid(truth: HeightField, cell_size: float, margin: float) -> HeightField:
    """Empty grid inside the truth extent, trimmed by ``margin`` meters."""
    x0, y0 = truth.origin
    width = truth.cols * truth.cell_size - 2 * margin
    height = truth.rows * truth.cell_size - 2 * margin
    cols, rows = int(math.floor(width / cell_size)), int(math.floor(height / cell_size))
    if rows < 1 or cols < 1:
        raise ArgumentError("margin leaves no cells to score")
    return empty_grid((x0 + margin, y0 - margin), cell_size, (rows, cols))


def truth_on_grid(truth: HeightField, grid: HeightField) -> HeightField:
    """Nearest-cell resampling of truth heights and classes onto ``grid``."""
    if truth.same_grid(grid):
        return truth
    x, y = grid.cell_centers()
    h = truth.sample_nearest(x, y)
    fr, fc = truth.world_to_cell(x, y)
    ri, ci = np.rint(fr).astype(np.int64), np.rint(fc).astype(np.int64)
    inside = (ri >= 0) & (ri < truth.rows) & (ci >= 0) & (ci < truth.cols)
    cls = np.full(grid.shape, UNLABELED, np.uint8)
    if truth.classes is not None:
        cls[inside] = truth.classes[ri[inside], ci[inside]]
    return HeightField(grid.origin, grid.cell_size, h, cls)


def _multiview_task(args):
    pair_dir, config, grid, out_dir = args
    pair, meta = load_pair(pair_dir)
    disp = match_pair(pair, meta, config, prior=config.prior.enabled, fill_invalid=config.fusion.fill_invalid)
    shape = tuple(meta.get("tile_shape") or pair.shape)
    box = tile_world_box(pair.cam_left, shape, meta["zmin"], meta["zmax"])
    PL = fit_projection_matrix(pair.cam_left, box)
    PR = fit_projection_matrix(pair.cam_right, box)
    cloud = disparity_to_labeled_points(pair, disp, PL, PR)
    field_ = rasterize_heights(cloud, grid)
    out = Path(out_dir) / "pairs" / pair.pair_id
    out.mkdir(parents=True, exist_ok=True)
    write_disparity(out / "disparity", disp)
    write_height_field(out / "dsm", field_)
    return pair.pair_id, field_, max(PL.fitted_residual_px, PR.fitted_residual_px)


def score_multiview(recon: HeightField, truth: HeightField, config: RunConfig, label: str = "fused") -> MetricsReport:
    """Translation estimate, Z completeness/accuracy and combined 3-D mIoU."""
    m = config.metrics
    align = estimate_3d_translation(truth, recon, xy_radius=m.xy_radius)
    report = MetricsReport("multiview", label=label)
    report.add("z_", z_metrics(recon, truth, m.z_thresh, align, m.z_statistic))
    if recon.classes is not None and truth.classes is not None:
        report.add("combined_", combined_miou_3d(recon, truth, m.z_thresh, align))
    report.values.update(tx=align.tx, ty=align.ty, tz=align.tz, inlier_fraction=align.inlier_fraction)
    err = np.abs(recon.heights - truth.heights) if recon.same_grid(truth) else None
    if err is not None:
        both = np.isfinite(err)
        report.values["rms_z_error"] = float(np.sqrt(np.mean(err[both] ** 2))) if both.any() else math.nan
    return report


def run_multiview_benchmark(
    dataset_dir: str | Path,
    pairs_dir: str | Path,
    config: RunConfig,
    out_dir: str | Path | None = None,
    pair_ids: Sequence[str] | None = None,
) -> MetricsReport:
    """Match, triangulate, grid and fuse every selected pair, then score.

    Per-pair disparities and height fields plus the fused surface are
    written under ``out_dir``. A single pair runs but is flagged as having
    no fusion benefit.
    """
    from semstereo.pipeline.dataset import load_truth_dsm

    out_dir = Path(out_dir or config.output_dir)
    truth_full = load_truth_dsm(dataset_dir)
    if truth_full is None:
        raise DataError(f"{dataset_dir} carries no truth DSM")
    dirs = list_pairs(pairs_dir)
    if pair_ids is not None:
        wanted = set(pair_ids)
        dirs = [d for d in dirs if d.name in wanted]
    if not dirs:
        raise DataError("no pairs to fuse")
    grid = scoring_grid(truth_full, config.fusion.cell_size, config.fusion.margin)
    truth = truth_on_grid(truth_full, grid)
    results = _map(_multiview_task, [(d, config, grid, out_dir) for d in dirs], config.workers)
    for pid, f, _ in results:
        if not f.same_grid(grid):
            raise DataError(f"pair {pid} produced a height field off the fusion grid")
    fields = [f for _, f, _ in results]
    fused = fuse_multiview(fields, config.fusion.min_support, config.fusion.tolerance)
    write_height_field(out_dir / "fused_dsm", fused)
    write_height_field(out_dir / "truth_dsm", truth)
    report = score_multiview(fused, truth, config)
    report.counts["pairs"] = len(fields)
    report.params["fusion"] = "median" if len(fields) > 1 else "no fusion benefit (single pair)"
    pair_rms = []
    for pid, f, res in results:
        z = z_metrics(f, truth, config.metrics.z_thresh, statistic=config.metrics.z_statistic)
        report.values[f"pair.{pid}.z_completeness"] = z.completeness
        report.values[f"pair.{pid}.z_accuracy"] = z.accuracy
        report.values[f"pair.{pid}.camera_residual_px"] = res
        e = f.heights - truth.heights
        ok = np.isfinite(e)
        pair_rms.append(float(np.sqrt(np.mean(e[ok] ** 2))) if ok.any() else math.nan)
    report.values["best_pair_rms_z_error"] = float(np.nanmin(pair_rms))
    (out_dir / "multiview_report.json").write_text(report.to_json())
    return report


# ---------------------------------------------------------------------------
# manifest


def versions() -> dict:
    return {
        "semstereo": semstereo.__version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def _digests(paths: Sequence[Path], root: Path) -> dict:
    out = {}
    for p in sorted(paths):
        try:
            key = str(p.relative_to(root))
        except ValueError:
            key = str(p)
        out[key] = file_digest(p)
    return out


def _files_under(path: Path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.exists():
        return []
    return [p for p in path.rglob("*") if p.is_file() and p.name != "manifest.json"]


def write_manifest(out_dir: str | Path, command: str, config: RunConfig, inputs: Sequence[str | Path], args: dict | None = None) -> Path:
    """Record config hash, input and output hashes and library versions.

    Contains no timestamps or worker counts, so identical runs produce
    identical manifests.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    input_files = {}
    for inp in inputs:
        inp = Path(inp)
        input_files.update(_digests(_files_under(inp), inp.parent))
    manifest = {
        "command": command,
        "args": args or {},
        "config_sha256": config.digest(),
        "config": {k: v for k, v in config.to_dict().items() if k not in ("workers", "output_dir")},
        "inputs": input_files,
        "outputs": _digests(_files_under(out_dir), out_dir),
        "versions": versions(),
    }
    path = out_dir / "manifest.json"
    dump_json(manifest, path)
    return path
