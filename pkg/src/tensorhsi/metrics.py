"""Confusion matrix, OA / AA / kappa, per-class accuracy and classification-map rendering."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

import numpy as np

# RGB triples for labels 0..9; 0 (unlabeled) is black
DEFAULT_PALETTE = (
    (0, 0, 0),
    (192, 192, 192),
    (0, 255, 0),
    (0, 255, 255),
    (0, 128, 0),
    (255, 0, 255),
    (165, 82, 41),
    (128, 0, 128),
    (255, 0, 0),
    (255, 255, 0),
)


class MetricError(ValueError):
    """Raised when a metric is undefined for the given counts."""


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows indexed by true class and columns by predicted class (ids 1..M)."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {m.shape}")
        if np.any(m < 0) or not np.all(m == np.round(m)):
            raise ValueError("confusion matrix entries must be non-negative integers")
        object.__setattr__(self, "m", m.astype(np.int64))

    @property
    def n_classes(self) -> int:
        return self.m.shape[0]

    @property
    def total(self) -> int:
        return int(self.m.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.m + other.m)


def accumulate(preds: Sequence[int], truths: Sequence[int], n_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truths = np.asarray(truths, dtype=np.int64).ravel()
    if preds.shape != truths.shape:
        raise ValueError(f"{preds.size} predictions for {truths.size} truths")
    for name, ids in (("prediction", preds), ("truth", truths)):
        bad = ids[(ids < 1) | (ids > n_classes)]
        if bad.size:
            raise ValueError(f"{name} id {int(bad[0])} outside 1..{n_classes}")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (truths - 1, preds - 1), 1)
    return ConfusionMatrix(m)


def _nonempty(cm: ConfusionMatrix) -> np.ndarray:
    if cm.total == 0:
        raise MetricError("confusion matrix is empty")
    return cm.m.astype(np.float64)


def oa(cm: ConfusionMatrix) -> float:
    m = _nonempty(cm)
    return float(np.trace(m) / m.sum())


def per_class(cm: ConfusionMatrix) -> list[float]:
    m = _nonempty(cm)
    rows = m.sum(axis=1)
    empty = np.flatnonzero(rows == 0)
    if empty.size:
        raise MetricError(f"class {int(empty[0]) + 1} has no samples")
    return (np.diag(m) / rows).tolist()


def aa(cm: ConfusionMatrix) -> float:
    pc = per_class(cm)
    return math.fsum(pc) / len(pc)


def chance_agreement(cm: ConfusionMatrix) -> float:
    m = _nonempty(cm)
    n = m.sum()
    return float(np.dot(m.sum(axis=1), m.sum(axis=0)) / (n * n))


def kappa(cm: ConfusionMatrix) -> float:
    po = oa(cm)
    pe = chance_agreement(cm)
    if pe == 1.0:
        raise MetricError("kappa is undefined when chance agreement is 1")
    return float((po - pe) / (1.0 - pe))


# -- reporting -------------------------------------------------------------------


def display(x: float, places: int = 2) -> str:
    """Round half away from zero to ``places`` decimals (for percentages)."""
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def report(cm: ConfusionMatrix, config_digest: str = "", seed: int | None = None) -> dict:
    """Metric document; full-precision fractions plus rounded percentage strings."""
    pc = per_class(cm)
    o, a = oa(cm), aa(cm)
    try:
        k = kappa(cm)
    except MetricError:
        k = None
    return {
        "per_class": pc,
        "oa": o,
        "aa": a,
        "kappa": k,
        "kappa_x100": None if k is None else 100.0 * k,
        "counts": cm.m.tolist(),
        "display": {
            "per_class": [display(100 * v) for v in pc],
            "oa": display(100 * o),
            "aa": display(100 * a),
            "kappa": None if k is None else display(100 * k),
        },
        "config_digest": config_digest,
        "seed": seed,
    }


def report_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def render_map(labels: np.ndarray, palette: Sequence[Sequence[int]] = DEFAULT_PALETTE) -> bytes:
    """Binary P6 pixmap of a label image (0 = unlabeled)."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    pal = np.asarray(palette, dtype=np.int64)
    if pal.ndim != 2 or pal.shape[1] != 3 or np.any((pal < 0) | (pal > 255)):
        raise ValueError("palette must be a list of 8-bit RGB triples")
    if labels.size and (labels.min() < 0 or labels.max() >= len(pal)):
        raise ValueError(f"label {int(labels.max())} has no palette entry "
                         f"(palette covers 0..{len(pal) - 1})")
    h, w = labels.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + pal[labels.astype(np.int64)].astype(np.uint8).tobytes()
