"""Challenge metrics: confusion counts, the five ratios, dataset averaging."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidInputError, ShapeError

METRIC_NAMES = ("sensitivity", "specificity", "accuracy", "dice", "jaccard")
CSV_HEADER = "image_id,tp,fp,tn,fn," + ",".join(METRIC_NAMES)


@dataclass(frozen=True)
class MetricReport:
    tp: int
    fp: int
    tn: int
    fn: int
    sensitivity: float
    specificity: float
    accuracy: float
    dice: float
    jaccard: float

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self) -> dict:
        return asdict(self)

    def to_csv(self, image_id: str) -> str:
        counts = f"{self.tp},{self.fp},{self.tn},{self.fn}"
        ratios = ",".join(f"{getattr(self, n):.6f}" for n in METRIC_NAMES)
        return f"{image_id},{counts},{ratios}"


def threshold_mask(prob, t: float = 0.8) -> np.ndarray:
    """Binary mask of pixels whose object probability strictly exceeds ``t``."""
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError(f"threshold must lie in [0, 1], got {t}")
    return (np.asarray(prob) > t).astype(np.uint8)


def _binary(x, name: str) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype == bool:
        return a
    vals = np.unique(a)
    if np.isin(vals, (0, 1)).all():
        return a.astype(bool)
    if np.isin(vals, (0, 255)).all():
        return a == 255
    raise InvalidInputError(f"{name} must be binary ({{0,1}} or {{0,255}}), found values {vals[:5].tolist()}")


def _ratio(num: int, den: int, exact: bool) -> float:
    # 0/0 only arises when the ratio's support is empty; it counts as a
    # success exactly when prediction and ground truth agree everywhere
    if den == 0:
        return 1.0 if exact else 0.0
    return num / den


def evaluate(pred, gt) -> MetricReport:
    p = _binary(pred, "pred")
    g = _binary(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} differ")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    exact = fp == 0 and fn == 0
    return MetricReport(
        tp, fp, tn, fn,
        sensitivity=_ratio(tp, tp + fn, exact),
        specificity=_ratio(tn, tn + fp, exact),
        accuracy=(tp + tn) / p.size,
        dice=_ratio(2 * tp, 2 * tp + fp + fn, exact),
        jaccard=_ratio(tp, tp + fp + fn, exact),
    )


def dataset_mean(reports: Sequence[MetricReport] | Iterable[MetricReport]) -> MetricReport:
    """Unweighted per-image mean of each ratio; confusion counts are summed."""
    reports = list(reports)
    if not reports:
        raise InvalidArgumentError("dataset_mean needs at least one report")
    values = {}
    for f in fields(MetricReport):
        col = [getattr(r, f.name) for r in reports]
        values[f.name] = int(sum(col)) if f.name in ("tp", "fp", "tn", "fn") else float(np.mean(col))
    return MetricReport(**values)
