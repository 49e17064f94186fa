"""Confusion counts, agreement scores and changed-area statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from urbdiff.errors import LabelError, ShapeError
from urbdiff.raster import GeoTransform

METRIC_NAMES = ("overall_accuracy", "kappa", "recall", "precision", "f1")


@dataclass(frozen=True)
class Confusion:
    """Binary confusion counts; class 1 (change) is the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n == 0:
            raise ValueError("confusion matrix is empty")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp,
                         self.fn + other.fn, self.tn + other.tn)

    def matrix(self) -> np.ndarray:
        """2x2 counts, rows = truth (1, 0), columns = prediction (1, 0)."""
        return np.array([[self.tp, self.fn], [self.fp, self.tn]], dtype=np.int64)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn, "n": self.n}


def _check_binary(a: np.ndarray, what: str) -> None:
    bad = (a != 0) & (a != 1)
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise LabelError(f"{what} has non-binary value {a[tuple(idx)]!r} at {tuple(int(i) for i in idx)}")


def confusion(pred, truth) -> Confusion:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    if pred.size == 0:
        raise ShapeError("maps are empty")
    _check_binary(pred, "prediction")
    _check_binary(truth, "truth")
    counts = np.bincount((2 * truth.astype(np.int64) + pred.astype(np.int64)).ravel(), minlength=4)
    tn, fp, fn, tp = (int(c) for c in counts)
    return Confusion(tp, fp, fn, tn)


@dataclass
class ScoreReport:
    """The five agreement scores. A score is None when its ratio is undefined;
    ``undefined`` then carries the reason."""

    confusion: Confusion
    overall_accuracy: float | None
    kappa: float | None
    recall: float | None
    precision: float | None
    f1: float | None
    undefined: dict[str, str] = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"confusion": self.confusion.as_dict()}
        for name in METRIC_NAMES:
            out[name] = getattr(self, name)
        out["undefined"] = {k: self.undefined[k] for k in METRIC_NAMES if k in self.undefined}
        return out


def f1_score(precision: float, recall: float) -> float | None:
    if precision + recall == 0:
        return None
    return 2 * precision * recall / (precision + recall)


def scores(c: Confusion) -> ScoreReport:
    n = c.n
    undefined = {}
    oa = (c.tp + c.tn) / n
    pe = ((c.tp + c.fp) * (c.tp + c.fn) + (c.fn + c.tn) * (c.fp + c.tn)) / (n * n)
    if pe == 1:
        kappa = None
        undefined["kappa"] = "undefined (chance agreement is 1: a single class in both maps)"
    else:
        kappa = (oa - pe) / (1 - pe)
    if c.tp + c.fn == 0:
        recall = None
        undefined["recall"] = "undefined (no actual positives)"
    else:
        recall = c.tp / (c.tp + c.fn)
    if c.tp + c.fp == 0:
        precision = None
        undefined["precision"] = "undefined (no predicted positives)"
    else:
        precision = c.tp / (c.tp + c.fp)
    if precision is None or recall is None:
        f1 = None
        undefined["f1"] = "undefined (precision or recall undefined)"
    else:
        f1 = f1_score(precision, recall)
        if f1 is None:
            undefined["f1"] = "undefined (precision + recall = 0)"
    return ScoreReport(c, oa, kappa, recall, precision, f1, undefined)


@dataclass(frozen=True)
class AreaStats:
    change_pixels: int
    total_pixels: int
    pixel_area_m2: float
    area_m2: float
    fraction: float

    def as_dict(self) -> dict:
        return {
            "change_pixels": self.change_pixels,
            "total_pixels": self.total_pixels,
            "pixel_area_m2": self.pixel_area_m2,
            "area_m2": self.area_m2,
            "fraction": self.fraction,
        }


def changed_area(change_map, geo: GeoTransform) -> AreaStats:
    """Urbanised area (label-1 pixel count times pixel area) and its share of the map.

    ``change_map`` may be a ChangeMap or a 2-D label array.
    """
    labels = np.asarray(getattr(change_map, "labels", change_map))
    if labels.ndim != 2 or labels.size == 0:
        raise ShapeError(f"change map must be a non-empty 2-D array, got {labels.shape}")
    count = int(np.count_nonzero(labels == 1))
    px = geo.pixel_area()
    return AreaStats(count, int(labels.size), px, count * px, count / labels.size)


def area_from_fraction(fraction: float, total_area_m2: float) -> float:
    return fraction * total_area_m2


def report(c: Confusion, area: AreaStats | None = None) -> dict:
    out = scores(c).as_dict()
    if area is not None:
        out["area"] = area.as_dict()
    return out


def report_json(c: Confusion, area: AreaStats | None = None) -> str:
    # insertion order is fixed above; no key sorting so related fields stay together
    return json.dumps(report(c, area), indent=2)
