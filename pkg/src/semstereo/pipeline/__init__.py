"""On-disk data model, configuration, orchestration and CLI."""

from semstereo.pipeline.benchmark import (
    Selection,
    rectify_tiles,
    run_multiview_benchmark,
    run_pairwise_benchmark,
    score_multiview,
    select_pairs,
    write_manifest,
)
from semstereo.pipeline.config import RunConfig
from semstereo.pipeline.dataset import SynthSpec, write_synth_dataset
from semstereo.pipeline.io import TileBundle, load_pair, load_tile, load_tiles, save_pair, save_tile

__all__ = [
    "RunConfig",
    "Selection",
    "SynthSpec",
    "TileBundle",
    "load_pair",
    "load_tile",
    "load_tiles",
    "rectify_tiles",
    "run_multiview_benchmark",
    "run_pairwise_benchmark",
    "save_pair",
    "save_tile",
    "score_multiview",
    "select_pairs",
    "write_manifest",
    "write_synth_dataset",
]
