"""Semantic stereo toolkit for incidental satellite image pairs.

RPC camera geometry, epipolar rectification, semi-global matching with a
semantic prior, median multi-view fusion and the benchmark metrics, all
testable end to end on synthetic scenes.
"""

from semstereo.classes import CLASS_CODES, ClassCode, ClassSet
from semstereo.errors import (
    ApproximationError,
    ArgumentError,
    ConvergenceError,
    DataError,
    DegeneracyError,
    InsufficientOverlapError,
    NumericalError,
    OutOfBoundsError,
    PoleError,
    SemStereoError,
)

__version__ = "0.1.0"

__all__ = [
    "CLASS_CODES",
    "ClassCode",
    "ClassSet",
    "ApproximationError",
    "ArgumentError",
    "ConvergenceError",
    "DataError",
    "DegeneracyError",
    "InsufficientOverlapError",
    "NumericalError",
    "OutOfBoundsError",
    "PoleError",
    "SemStereoError",
    "__version__",
]
