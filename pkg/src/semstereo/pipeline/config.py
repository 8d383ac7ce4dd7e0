"""Run configuration with a lossless JSON round trip.

Schema (all sections optional, unknown keys rejected)::

    {
      "task": "pairwise" | "multiview" | "all",
      "seed": 0,
      "workers": 1,
      "output_dir": "run",
      "matcher": {SgmParams fields},
      "prior": {"enabled": true, "compare": true, "beta_same": 2.0,
                "beta_diff": 0.5, "gamma": null, "stable_classes": [2, 6, 9]},
      "selection": {"max_month_diff": 12, "min_angle_deg": 5.0,
                    "max_angle_deg": 45.0, "epe_thresh": 5.0},
      "fusion": {"cell_size": 1.0, "min_support": null, "consensus_tol": 1.0,
                 "margin": 32.0, "fill_invalid": false},
      "metrics": {"disparity_thresh": 3.0, "z_thresh": 1.0,
                  "z_statistic": "rms", "xy_radius": 3}
    }
"""

from __future__ import annotations

import hashlib
import math
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from semstereo.errors import ArgumentError, DataError
from semstereo.matcher import SemanticPriorParams, SgmParams

TASKS = ("pairwise", "multiview", "all")


@dataclass(frozen=True)
class PriorConfig:
    """Semantic prior settings; ``compare`` also scores the prior-off run."""

    enabled: bool = True
    compare: bool = True
    beta_same: float = 2.0
    beta_diff: float = 0.5
    gamma: float | None = None
    stable_classes: tuple[int, ...] = (2, 6, 9)

    def __post_init__(self):
        object.__setattr__(self, "stable_classes", tuple(int(c) for c in self.stable_classes))
        self.params()

    def params(self) -> SemanticPriorParams:
        return SemanticPriorParams(self.beta_same, self.beta_diff, self.gamma, self.stable_classes)


@dataclass(frozen=True)
class SelectionConfig:
    max_month_diff: int = 12
    min_angle_deg: float = 5.0
    max_angle_deg: float = 45.0
    epe_thresh: float = 5.0

    def __post_init__(self):
        if self.max_month_diff < 0:
            raise ArgumentError("max_month_diff must be nonnegative")
        if not 0 < self.min_angle_deg < self.max_angle_deg:
            raise ArgumentError("angle window must satisfy 0 < min < max")
        if not self.epe_thresh > 0:
            raise ArgumentError("epe_thresh must be positive")


@dataclass(frozen=True)
class FusionConfig:
    """Gridding and fusion settings.

    ``consensus_tol`` (meters) is how close a pair's height must be to the
    cell median to count toward ``min_support``; null counts every pair.
    ``margin`` (meters) trims the scored grid to the interior covered by
    every view; ``fill_invalid`` controls matcher in-fill for the
    multi-view run, where holes are better left to the other pairs.
    """

    cell_size: float = 1.0
    min_support: int | None = None
    consensus_tol: float | None = 1.0
    margin: float = 32.0
    fill_invalid: bool = False

    @property
    def tolerance(self) -> float:
        return math.inf if self.consensus_tol is None else float(self.consensus_tol)

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ArgumentError("cell_size must be positive")
        if self.min_support is not None and self.min_support < 1:
            raise ArgumentError("min_support must be at least 1")
        if self.consensus_tol is not None and not self.consensus_tol > 0:
            raise ArgumentError("consensus_tol must be positive")
        if self.margin < 0:
            raise ArgumentError("margin must be nonnegative")


@dataclass(frozen=True)
class MetricConfig:
    disparity_thresh: float = 3.0
    z_thresh: float = 1.0
    z_statistic: str = "rms"
    xy_radius: int = 3

    def __post_init__(self):
        if not (self.disparity_thresh > 0 and self.z_thresh > 0):
            raise ArgumentError("metric thresholds must be positive")
        if self.z_statistic not in ("rms", "median"):
            raise ArgumentError("z_statistic must be 'rms' or 'median'")
        if self.xy_radius < 0:
            raise ArgumentError("xy_radius must be nonnegative")


_SECTIONS = {
    "matcher": SgmParams,
    "prior": PriorConfig,
    "selection": SelectionConfig,
    "fusion": FusionConfig,
    "metrics": MetricConfig,
}


@dataclass(frozen=True)
class RunConfig:
    task: str = "all"
    seed: int = 0
    workers: int = 1
    output_dir: str = "run"
    matcher: SgmParams = field(default_factory=SgmParams)
    prior: PriorConfig = field(default_factory=PriorConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ArgumentError(f"task must be one of {TASKS}")
        if self.workers < 1:
            raise ArgumentError("workers must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prior"]["stable_classes"] = list(d["prior"]["stable_classes"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ArgumentError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in _SECTIONS:
                sect = _SECTIONS[k]
                if not isinstance(v, dict):
                    raise ArgumentError(f"config section {k!r} must be an object")
                bad = set(v) - {f.name for f in fields(sect)}
                if bad:
                    raise ArgumentError(f"unknown keys in {k!r}: {sorted(bad)}")
                try:
                    kw[k] = sect(**v)
                except TypeError as exc:
                    raise ArgumentError(f"config section {k!r}: {exc}") from exc
            else:
                kw[k] = v
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ArgumentError(f"config is not valid JSON: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            return cls.from_json(Path(path).read_text())
        except FileNotFoundError as exc:
            raise DataError(f"config file {path} not found") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    def digest(self) -> str:
        """Hash of the settings that affect outputs (worker count excluded)."""
        d = self.to_dict()
        d.pop("workers")
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)
