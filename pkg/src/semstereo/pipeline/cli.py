"""Command-line entry point.

Exit codes: 0 success, 2 argument errors, 3 data errors, 4 numerical
failures. Every command writes ``manifest.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from semstereo.errors import ApproximationError, ArgumentError, DataError, SemStereoError
from semstereo.fusion import fuse_multiview
from semstereo.geometry import fit_projection_matrix
from semstereo.metrics import MetricsReport, pointcloud_metrics
from semstereo.pipeline import benchmark as bm
from semstereo.pipeline.config import RunConfig
from semstereo.pipeline.dataset import SynthSpec, write_synth_dataset
from semstereo.pipeline.io import (
    dump_json,
    list_pairs,
    load_json,
    load_pair,
    load_tile,
    load_tiles,
    read_height_field,
    read_labels,
    read_points,
    read_raster,
    save_pair,
    save_tile,
    write_disparity,
    write_height_field,
)
from semstereo.registration import align_translation_mi, apply_alignment

logger = logging.getLogger("semstereo")


def _tile_map(dataset: Path) -> dict:
    return {t.tile_id: t for t in load_tiles(dataset)}


def cmd_synth(args, config: RunConfig) -> Path:
    spec = SynthSpec(seed=args.seed if args.seed is not None else config.seed, image_size=args.size)
    if args.spec:
        spec = SynthSpec.from_dict(load_json(args.spec))
    out = write_synth_dataset(args.out, spec)
    bm.write_manifest(out, "synth", config, [args.spec] if args.spec else [], {"spec": spec.to_dict()})
    return out


def cmd_rectify(args, config: RunConfig) -> Path:
    tiles = _tile_map(args.dataset)
    if args.pairs_file:
        ids = load_json(args.pairs_file)["kept"]
        todo = [tuple(p.split("__")) for p in ids]
    else:
        if not (args.left and args.right):
            raise ArgumentError("give --left and --right tile ids or --pairs-file")
        todo = [(args.left, args.right)]
    out = Path(args.out)
    for l, r in todo:
        if l not in tiles or r not in tiles:
            raise DataError(f"unknown tile id in pair {l}, {r}")
        pair, meta = bm.rectify_tiles(tiles[l], tiles[r], with_truth=not args.no_truth)
        save_pair(pair, out, meta)
        logger.info("%s: y-parallax rms %.3f px", pair.pair_id, pair.y_parallax_rms)
    bm.write_manifest(out, "rectify", config, [Path(args.dataset) / "tiles"], {"pairs": ["__".join(p) for p in todo]})
    return out


def cmd_truth(args, config: RunConfig) -> Path:
    pair, meta = load_pair(args.pair)
    tiles = _tile_map(args.dataset)
    pair = bm.truth_for_pair(pair, tiles[meta["left_tile"]], tiles[meta["right_tile"]])
    out = save_pair(pair, Path(args.pair).parent, meta)
    bm.write_manifest(out, "truth", config, [Path(args.dataset) / "tiles"], {"pair": pair.pair_id})
    return out


def cmd_align(args, config: RunConfig) -> Path:
    reference, _ = read_raster(args.reference)
    tile = load_tile(args.tile)
    result = align_translation_mi(reference, tile.image, radius=args.radius, bins=args.bins)
    out = Path(args.out)
    aligned = replace(tile, rpc=apply_alignment(tile.rpc, result))
    tdir = save_tile(aligned, out)
    dump_json(vars(result), tdir / "alignment.json")
    bm.write_manifest(tdir, "align", config, [args.reference, args.tile], {"radius": args.radius, "bins": args.bins})
    return tdir


def cmd_match(args, config: RunConfig) -> Path:
    pair, meta = load_pair(args.pair)
    labels = None
    if args.labels_left and args.labels_right:
        labels = (read_raster(args.labels_left)[0], read_raster(args.labels_right)[0])
    disp = bm.match_pair(pair, meta, config, prior=args.prior, labels=labels)
    out = Path(args.out)
    write_disparity(out / "disparity", disp)
    bm.write_manifest(out, "match", config, [args.pair], {"prior": args.prior})
    return out


def cmd_fuse(args, config: RunConfig) -> Path:
    fields = [read_height_field(p) for p in args.inputs]
    for p, f in zip(args.inputs, fields):
        if not f.same_grid(fields[0]):
            raise DataError(f"height field {p} is not on the grid of {args.inputs[0]}")
    tol = args.consensus_tol if args.consensus_tol is not None else config.fusion.tolerance
    fused = fuse_multiview(fields, args.min_support if args.min_support else config.fusion.min_support, tol)
    out = Path(args.out)
    write_height_field(out / "fused_dsm", fused)
    bm.write_manifest(out, "fuse", config, [Path(p).with_suffix(".bin") for p in args.inputs])
    return out


def cmd_score_pairwise(args, config: RunConfig) -> Path:
    out = Path(args.out)
    reports = bm.run_pairwise_benchmark(args.pairs, config, out, args.pred_dir, args.label_dir)
    print((out / "pairwise_table.txt").read_text(), end="")
    bm.write_manifest(out, "score-pairwise", config, [args.pairs] + ([args.pred_dir] if args.pred_dir else []))
    return out


def cmd_score_multiview(args, config: RunConfig) -> Path:
    out = Path(args.out)
    if args.recon:
        truth = read_height_field(args.truth)
        report = bm.score_multiview(read_height_field(args.recon), truth, config)
        out.mkdir(parents=True, exist_ok=True)
        (out / "multiview_report.json").write_text(report.to_json())
        inputs = [Path(args.recon).with_suffix(".bin"), Path(args.truth).with_suffix(".bin")]
    else:
        if not (args.dataset and args.pairs):
            raise ArgumentError("give --recon/--truth or --dataset/--pairs")
        ids = load_json(args.pairs_file)["kept"] if args.pairs_file else None
        report = bm.run_multiview_benchmark(args.dataset, args.pairs, config, out, ids)
        inputs = [args.pairs, Path(args.dataset) / "truth"]
    print(report.to_text(), end="")
    bm.write_manifest(out, "score-multiview", config, inputs)
    return out


def cmd_score_pointcloud(args, config: RunConfig) -> Path:
    _, pred = read_points(args.pred)
    _, truth = read_points(args.truth)
    if args.pred_labels:
        pred = read_labels(args.pred_labels)
    if pred is None or truth is None:
        raise DataError("both point clouds need .labels files")
    scores = pointcloud_metrics(pred, truth)
    report = MetricsReport(
        "pointcloud", counts={"evaluated": scores.n_evaluated, "ignored": scores.n_ignored, "total": len(truth)}
    ).add("", scores)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pointcloud_report.json").write_text(report.to_json())
    print(report.to_text(), end="")
    bm.write_manifest(out, "score-pointcloud", config, [args.pred, args.truth])
    return out


def cmd_select_pairs(args, config: RunConfig) -> Path:
    tiles = load_tiles(args.dataset)
    sel = bm.select_pairs(tiles, config, run_filter=not args.no_filter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(sel.to_dict(), out / "selection.json")
    print(sel.summary())
    bm.write_manifest(out, "select-pairs", config, [Path(args.dataset) / "tiles"], {"filter": not args.no_filter})
    return out


def cmd_fit_projection(args, config: RunConfig) -> Path:
    tile = load_tile(args.tile)
    zmin, zmax = bm.height_bounds(tile)
    if args.zmin is not None:
        zmin = args.zmin
    if args.zmax is not None:
        zmax = args.zmax
    box = bm.tile_world_box(tile.rpc, tile.shape, zmin, zmax)
    cam = fit_projection_matrix(tile.rpc, box)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(
        {
            "tile_id": tile.tile_id,
            "matrix": np.asarray(cam.matrix).tolist(),
            "fitted_residual_px": cam.fitted_residual_px,
            "box": [box.xmin, box.xmax, box.ymin, box.ymax, box.zmin, box.zmax],
        },
        out / "projection.json",
    )
    bm.write_manifest(out, "fit-projection", config, [args.tile])
    print(f"{tile.tile_id}: max residual {cam.fitted_residual_px:.4f} px")
    if cam.fitted_residual_px >= args.max_residual:
        raise ApproximationError(
            f"projection residual {cam.fitted_residual_px:.4f} px is not below {args.max_residual} px",
            cam.fitted_residual_px,
        )
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semstereo", description="Semantic stereo benchmark toolkit")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--workers", type=int, help="parallel workers (outputs do not depend on it)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="materialize a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--size", type=int, default=512, help="tile size in pixels")
    s.add_argument("--spec", help="JSON synthetic dataset spec (overrides --seed/--size)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("rectify", help="rectify tile pairs into pair bundles")
    s.add_argument("--dataset", required=True)
    s.add_argument("--left")
    s.add_argument("--right")
    s.add_argument("--pairs-file", help="selection.json from select-pairs")
    s.add_argument("--no-truth", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rectify)

    s = sub.add_parser("truth", help="(re)compute truth disparity for a pair bundle")
    s.add_argument("--dataset", required=True)
    s.add_argument("--pair", required=True)
    s.set_defaults(func=cmd_truth)

    s = sub.add_parser("align", help="MI translation alignment of a tile to a reference raster")
    s.add_argument("--reference", required=True)
    s.add_argument("--tile", required=True)
    s.add_argument("--radius", type=int, default=16)
    s.add_argument("--bins", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("match", help="SGM disparity for one pair bundle")
    s.add_argument("--pair", required=True)
    s.add_argument("--prior", action="store_true", help="apply the semantic prior")
    s.add_argument("--labels-left")
    s.add_argument("--labels-right")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("fuse", help="median fusion of height fields on one grid")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--min-support", type=int)
    s.add_argument("--consensus-tol", type=float, help="meters from the cell median for a pair to count as support")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("score-pairwise", help="pairwise benchmark over pair bundles")
    s.add_argument("--pairs", required=True)
    s.add_argument("--pred-dir", help="score <pred-dir>/<pair>/disparity instead of matching")
    s.add_argument("--label-dir", help="predicted labels at <label-dir>/<pair>/labels")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score_pairwise)

    s = sub.add_parser("score-multiview", help="multi-view fusion benchmark or DSM scoring")
    s.add_argument("--dataset")
    s.add_argument("--pairs")
    s.add_argument("--pairs-file", help="selection.json restricting the pairs")
    s.add_argument("--recon", help="score an existing DSM instead")
    s.add_argument("--truth")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score_multiview)

    s = sub.add_parser("score-pointcloud", help="label accuracy of a classified point cloud")
    s.add_argument("--pred", required=True)
    s.add_argument("--pred-labels")
    s.add_argument("--truth", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score_pointcloud)

    s = sub.add_parser("select-pairs", help="date, angle and matcher-EPE pair selection")
    s.add_argument("--dataset", required=True)
    s.add_argument("--no-filter", action="store_true", help="skip the EPE stage")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select_pairs)

    s = sub.add_parser("fit-projection", help="3x4 projection fit of a tile RPC")
    s.add_argument("--tile", required=True)
    s.add_argument("--zmin", type=float)
    s.add_argument("--zmax", type=float)
    s.add_argument("--max-residual", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_projection)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = RunConfig.load(args.config)
        if args.workers is not None:
            config = config.with_overrides(workers=args.workers)
        args.func(args, config)
    except SemStereoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
