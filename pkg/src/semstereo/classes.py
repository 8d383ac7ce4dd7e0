"""Semantic class codes shared by every module and by the on-disk formats."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class ClassCode(enum.IntEnum):
    # lidar-style classification codes, as stored on disk
    GROUND = 2
    TREE = 5
    BUILDING = 6
    WATER = 9
    UNLABELED = 65


CLASS_CODES = {c.name: int(c) for c in ClassCode}

# deterministic tie-break for label modes, highest priority first
LABEL_PRIORITY = (ClassCode.BUILDING, ClassCode.TREE, ClassCode.WATER, ClassCode.GROUND)


@dataclass(frozen=True)
class ClassSet:
    """Ordered evaluation classes; ``ignore`` never enters any IoU term."""

    classes: tuple[int, ...] = (
        ClassCode.GROUND,
        ClassCode.TREE,
        ClassCode.BUILDING,
        ClassCode.WATER,
    )
    ignore: int = ClassCode.UNLABELED

    def names(self) -> list[str]:
        out = []
        for c in self.classes:
            try:
                out.append(ClassCode(c).name)
            except ValueError:
                out.append(str(c))
        return out


def label_mode(labels: np.ndarray, axis: int = 0) -> np.ndarray:
    """Per-position mode of class codes along ``axis`` with the priority tie-break.

    UNLABELED entries are ignored; positions with no labeled entry get
    UNLABELED.
    """
    labels = np.asarray(labels)
    labels = np.moveaxis(labels, axis, 0)
    best = np.full(labels.shape[1:], int(ClassCode.UNLABELED), dtype=np.uint8)
    best_count = np.zeros(labels.shape[1:], dtype=np.int64)
    # iterate from highest to lowest priority so a strict '>' keeps the winner on ties
    for code in LABEL_PRIORITY:
        count = np.sum(labels == int(code), axis=0)
        better = count > best_count
        best[better] = int(code)
        best_count[better] = count[better]
    return best
