"""Benchmark scoring: disparity, segmentation, combined semantic-geometric,
height-field and point-cloud metrics, plus pair filtering and reports.

Conventions:
    * a disparity error is erroneous when strictly greater than the threshold;
    * a height cell is complete when its error is strictly below the threshold;
    * truth UNLABELED positions are ignored by every label metric;
    * mean IoU averages only classes whose union is nonempty.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from semstereo.classes import ClassCode, ClassSet
from semstereo.errors import ArgumentError, DataError
from semstereo.rasters import DisparityMap, HeightField


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, DisparityMap) else x, dtype=float)


# ---------------------------------------------------------------------------
# disparity


@dataclass(frozen=True)
class DisparityScores:
    epe: float
    d1: float
    n_truth_valid: int
    n_evaluated: int
    n_pred_invalid: int
    thresh: float

    @property
    def invalid_fraction(self) -> float:
        return self.n_pred_invalid / self.n_truth_valid

    def __iter__(self):
        return iter((self.epe, self.d1))


def disparity_metrics(pred, truth, thresh: float = 3.0) -> DisparityScores:
    """EPE and D1 over truth-valid pixels.

    Prediction-invalid pixels count as errors in D1 but are left out of the
    EPE mean; their share is reported as ``invalid_fraction``. EPE is NaN when
    no pixel is valid in both maps.
    """
    p = _values(pred)
    t = _values(truth)
    if p.shape != t.shape:
        raise ArgumentError(f"prediction shape {p.shape} differs from truth shape {t.shape}")
    tv = np.isfinite(t)
    n_truth = int(tv.sum())
    if n_truth == 0:
        raise DataError("no valid truth disparities to score")
    joint = tv & np.isfinite(p)
    err = np.abs(p[joint] - t[joint])
    n_joint = int(joint.sum())
    n_invalid = n_truth - n_joint
    # correctly rounded sums keep every metric exactly order independent
    epe = math.fsum(err.tolist()) / n_joint if n_joint else math.nan
    d1 = (int(np.count_nonzero(err > thresh)) + n_invalid) / n_truth
    return DisparityScores(epe, d1, n_truth, n_joint, n_invalid, float(thresh))


# ---------------------------------------------------------------------------
# labels


@dataclass(frozen=True)
class SegmentationScores:
    per_class_iou: dict[str, float]
    miou: float
    oa: float
    n_evaluated: int
    n_ignored: int

    def __iter__(self):
        return iter((self.per_class_iou, self.miou, self.oa))


def _label_arrays(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred).ravel().astype(np.int64)
    t = np.asarray(truth).ravel().astype(np.int64)
    if p.shape != t.shape:
        raise ArgumentError("prediction and truth label arrays differ in size")
    return p, t


def _mean_over_union(tp: np.ndarray, union: np.ndarray) -> tuple[np.ndarray, float]:
    iou = np.full(tp.shape, np.nan)
    has = union > 0
    iou[has] = tp[has] / union[has]
    miou = math.fsum(iou[has].tolist()) / int(has.sum()) if has.any() else math.nan
    return iou, miou


def segmentation_metrics(pred, truth, classes: ClassSet | None = None) -> SegmentationScores:
    """Per-class IoU, mIoU and overall accuracy; truth-ignore positions skipped."""
    classes = classes or ClassSet()
    p, t = _label_arrays(pred, truth)
    keep = t != classes.ignore
    n_eval = int(keep.sum())
    if n_eval == 0:
        raise DataError("every truth label is the ignore class")
    p, t = p[keep], t[keep]
    cls = np.asarray(classes.classes, dtype=np.int64)
    tp = np.array([np.count_nonzero((p == c) & (t == c)) for c in cls], float)
    in_pred = np.array([np.count_nonzero(p == c) for c in cls], float)
    in_truth = np.array([np.count_nonzero(t == c) for c in cls], float)
    iou, miou = _mean_over_union(tp, in_pred + in_truth - tp)
    oa = float(np.count_nonzero(p == t)) / n_eval
    return SegmentationScores(
        dict(zip(classes.names(), (float(v) for v in iou))), miou, oa, n_eval, int(keep.size - n_eval)
    )


def pointcloud_metrics(pred_labels, truth_labels, classes: ClassSet | None = None) -> SegmentationScores:
    """Per-point labeling scores; same definitions as image segmentation."""
    return segmentation_metrics(pred_labels, truth_labels, classes)


_UNITS = {"2D": "px", "3D": "m"}
_DEFAULT_THRESH = {"2D": 3.0, "3D": 1.0}


def parse_threshold(mode: str, thresh: float | str | None) -> float:
    """Threshold for a combined-mIoU mode; strings carry a unit ("3px", "1m")."""
    if mode not in _UNITS:
        raise ArgumentError(f"mode must be '2D' or '3D', got {mode!r}")
    if thresh is None:
        return _DEFAULT_THRESH[mode]
    if isinstance(thresh, str):
        m = re.fullmatch(r"\s*([-+0-9.eE]+|inf)\s*(px|m)\s*", thresh)
        if not m:
            raise ArgumentError(f"cannot parse threshold {thresh!r}")
        if m.group(2) != _UNITS[mode]:
            raise ArgumentError(f"threshold unit {m.group(2)!r} does not match mode {mode} ({_UNITS[mode]})")
        return float(m.group(1))
    return float(thresh)


@dataclass(frozen=True)
class CombinedScores:
    per_class_iou: dict[str, float]
    miou: float
    mode: str
    thresh: float

    def __iter__(self):
        return iter((self.per_class_iou, self.miou))


def combined_miou(
    pred_labels,
    pred_geom_err,
    truth_labels,
    mode: str = "2D",
    thresh: float | str | None = None,
    classes: ClassSet | None = None,
) -> CombinedScores:
    """Semantic IoU where a true positive also needs geometric error < thresh.

    ``pred_geom_err`` holds absolute geometric errors (pixels for 2D, meters
    for 3D). NaN marks positions without measurable truth geometry, which
    count as true positives on the label alone; use +inf for predictions
    without a geometric estimate. Truth-ignore positions are skipped, so
    predictions there are not false positives.
    """
    classes = classes or ClassSet()
    th = parse_threshold(mode, thresh)
    p, t = _label_arrays(pred_labels, truth_labels)
    e = np.asarray(pred_geom_err, dtype=float).ravel()
    if e.shape != p.shape:
        raise ArgumentError("geometric error array differs in size from the labels")
    keep = t != classes.ignore
    if not keep.any():
        raise DataError("every truth label is the ignore class")
    p, t, e = p[keep], t[keep], e[keep]
    geom_ok = np.isnan(e) | (e < th)
    cls = np.asarray(classes.classes, dtype=np.int64)
    tp = np.array([np.count_nonzero((p == c) & (t == c) & geom_ok) for c in cls], float)
    in_pred = np.array([np.count_nonzero(p == c) for c in cls], float)
    in_truth = np.array([np.count_nonzero(t == c) for c in cls], float)
    iou, miou = _mean_over_union(tp, in_truth + in_pred - tp)
    return CombinedScores(dict(zip(classes.names(), (float(v) for v in iou))), miou, mode, th)


# ---------------------------------------------------------------------------
# heights


@dataclass(frozen=True)
class ZScores:
    completeness: float
    accuracy: float
    statistic: str
    n_evaluated: int
    n_complete: int
    thresh: float

    def __iter__(self):
        return iter((self.completeness, self.accuracy))


def heights_on_grid(recon: HeightField, truth: HeightField, align=None) -> np.ndarray:
    """Recon heights sampled on the truth grid after undoing ``align``.

    ``align`` (with tx, ty, tz) describes recon as truth moved by that
    offset, so the inverse shift is applied before sampling.
    """
    if abs(recon.cell_size - truth.cell_size) > 1e-9:
        raise ArgumentError("recon and truth grids use different cell sizes")
    if align is not None:
        recon = recon.translated(-align.tx, -align.ty, -align.tz)
    if recon.same_grid(truth):
        return recon.heights
    x, y = truth.cell_centers()
    return recon.sample_nearest(x, y)


def z_metrics(
    recon: HeightField,
    truth: HeightField,
    thresh: float = 1.0,
    align=None,
    statistic: str = "rms",
) -> ZScores:
    """Completeness (|dz| < thresh over truth-valid cells) and accuracy.

    Accuracy is the RMS height error over complete cells, or their median
    absolute error with ``statistic="median"``. It is NaN when no cell is
    complete.
    """
    if statistic not in ("rms", "median"):
        raise ArgumentError("statistic must be 'rms' or 'median'")
    r = heights_on_grid(recon, truth, align)
    tv = truth.valid
    n_eval = int(tv.sum())
    if n_eval == 0:
        raise DataError("truth height field has no valid cells")
    err = np.abs(r[tv] - truth.heights[tv])
    complete = np.isfinite(err) & (err < thresh)
    n_complete = int(complete.sum())
    if n_complete == 0:
        acc = math.nan
    elif statistic == "rms":
        acc = math.sqrt(math.fsum((err[complete] ** 2).tolist()) / n_complete)
    else:
        acc = float(np.median(err[complete]))
    return ZScores(n_complete / n_eval, acc, statistic, n_eval, n_complete, float(thresh))


def combined_miou_3d(
    recon: HeightField, truth: HeightField, thresh: float | str = 1.0, align=None, classes: ClassSet | None = None
) -> CombinedScores:
    """Combined mIoU on a height grid: label match plus |dz| < thresh.

    Truth cells with a label but no height are scored on the label alone;
    recon cells without a height never pass the geometric test.
    """
    if recon.classes is None or truth.classes is None:
        raise ArgumentError("both height fields need class rasters")
    r = heights_on_grid(recon, truth, align)
    if align is not None or not recon.same_grid(truth):
        moved = recon.translated(-align.tx, -align.ty, 0.0) if align is not None else recon
        x, y = truth.cell_centers()
        row, col = moved.world_to_cell(x, y)
        ri, ci = np.rint(row).astype(np.int64), np.rint(col).astype(np.int64)
        inside = (ri >= 0) & (ri < moved.rows) & (ci >= 0) & (ci < moved.cols)
        labels = np.full(truth.shape, int(ClassCode.UNLABELED), dtype=np.int64)
        labels[inside] = moved.classes[ri[inside], ci[inside]]
    else:
        labels = recon.classes.astype(np.int64)
    err = np.abs(r - truth.heights)
    err = np.where(np.isfinite(truth.heights), np.where(np.isfinite(err), err, np.inf), np.nan)
    return combined_miou(labels, err, truth.classes, "3D", thresh, classes)


# ---------------------------------------------------------------------------
# pair filtering


def _epe_of(item) -> float:
    if isinstance(item, (tuple, list)):
        return float(item[1])
    if isinstance(item, dict):
        return float(item["epe"])
    return float(item.epe)


def pair_filter(pairs: Iterable, thresh: float = 5.0) -> tuple[list, list]:
    """Split pairs by matcher EPE: kept iff EPE <= thresh (NaN is rejected).

    Items may be (pair_id, epe) tuples, dicts with an "epe" key, or objects
    with an ``epe`` attribute. Input order is preserved in both outputs.
    """
    kept, rejected = [], []
    for item in pairs:
        epe = _epe_of(item)
        (kept if epe <= thresh else rejected).append(item)
    return kept, rejected


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    """Flat bundle of scores for one task.

    ``values`` holds scalar metrics (per-class entries as ``iou.<CLASS>``),
    ``counts`` the evaluated/ignored/total tallies and ``params`` the
    thresholds and options used.
    """

    task: str
    values: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    params: dict[str, Any] = field(default_factory=dict)
    label: str = ""

    TASKS = ("pairwise", "multiview", "pointcloud")

    def __post_init__(self):
        if self.task not in self.TASKS:
            raise ArgumentError(f"unknown report task {self.task!r}")
        c = self.counts
        if {"evaluated", "ignored", "total"} <= c.keys() and c["evaluated"] + c["ignored"] != c["total"]:
            raise ArgumentError("evaluated + ignored must equal total")

    def add(self, prefix: str, scores) -> "MetricsReport":
        """Merge a scores object into ``values`` under ``prefix``."""
        for k, v in asdict(scores).items():
            if isinstance(v, dict):
                for name, iou in v.items():
                    self.values[f"{prefix}iou.{name}"] = iou
            elif isinstance(v, (int, float)) and not isinstance(v, bool):
                if k.startswith("n_"):
                    self.counts[f"{prefix}{k[2:]}"] = int(v)
                elif k == "thresh":
                    self.params[f"{prefix}thresh"] = float(v)
                else:
                    self.values[f"{prefix}{k}"] = float(v)
            elif isinstance(v, str):
                self.params[f"{prefix}{k}"] = v
        return self

    def to_dict(self) -> dict:
        return {"task": self.task, "label": self.label, "values": self.values, "counts": self.counts, "params": self.params}

    def to_json(self) -> str:
        return json.dumps(_json_safe(self.to_dict()), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        values = {k: (math.nan if v is None else float(v)) for k, v in d["values"].items()}
        return cls(d["task"], values, dict(d["counts"]), dict(d["params"]), d.get("label", ""))

    def to_text(self) -> str:
        lines = [f"task = {self.task}"]
        if self.label:
            lines.append(f"label = {self.label}")
        for group in ("values", "counts", "params"):
            for k in sorted(getattr(self, group)):
                lines.append(f"{group}.{k} = {_fmt(getattr(self, group)[k])}")
        return "\n".join(lines) + "\n"


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_table(reports: Sequence[MetricsReport], columns: Sequence[str], digits: int = 2) -> str:
    """Plain-text table: one row per report, one column per value key."""
    header = ["pair"] + list(columns)
    rows = [header]
    for r in reports:
        cells = [r.label or r.task]
        for c in columns:
            v = r.values.get(c, math.nan)
            cells.append("-" if not math.isfinite(v) else f"{v:.{digits}f}")
        rows.append(cells)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    out = []
    for k, row in enumerate(rows):
        out.append("  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths))))
        if k == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"
