"""Calibration and discrimination metrics over scored eval records.

Hard labels derive from soft labels at 0.5 with ties counted positive.
Calibration error uses equal-width probability bins that are closed on
the right, so a probability sitting exactly on an interior edge belongs
to the lower bin and 0.0 belongs to the first bin.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_NUM_BINS = 10
DEFAULT_THRESHOLD = 0.5


class MetricError(ValueError):
    """Metric inputs are empty or degenerate beyond repair."""


class DegenerateMetricWarning(UserWarning):
    """A metric hit a zero denominator and fell back to 0.0."""


@dataclass
class EvalRecord:
    """One scored sample: model probability plus soft and hard labels."""

    prob: float
    soft_label: float
    hard_label: int

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise MetricError(f"prob must be in [0, 1], got {self.prob}")
        if not 0.0 <= self.soft_label <= 1.0:
            raise MetricError(f"soft_label must be in [0, 1], got {self.soft_label}")
        if self.hard_label not in (0, 1):
            raise MetricError(f"hard_label must be 0 or 1, got {self.hard_label}")

    @classmethod
    def from_soft(cls, prob: float, soft_label: float) -> "EvalRecord":
        return cls(prob=float(prob), soft_label=float(soft_label),
                   hard_label=1 if soft_label >= 0.5 else 0)


def _arrays(records) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        raise MetricError("no eval records")
    probs = np.asarray([r.prob for r in records], dtype=np.float64)
    hards = np.asarray([r.hard_label for r in records], dtype=np.float64)
    return probs, hards


def _bin_indices(probs: np.ndarray, num_bins: int) -> np.ndarray:
    # right-closed bins: interior edge values fall into the lower bin,
    # 0.0 into the first
    edges = np.arange(1, num_bins) / num_bins
    return np.searchsorted(edges, probs, side="left")


def ece(records, num_bins: int = DEFAULT_NUM_BINS) -> float:
    """Expected calibration error: occupancy-weighted |accuracy - confidence|
    per equal-width bin, against hard labels."""
    if num_bins < 1:
        raise MetricError(f"num_bins must be >= 1, got {num_bins}")
    probs, hards = _arrays(records)
    idx = _bin_indices(probs, num_bins)
    total = 0.0
    n = probs.shape[0]
    for b in range(num_bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            continue
        gap = abs(float(probs[mask].mean()) - float(hards[mask].mean()))
        total += (count / n) * gap
    return total


def reliability_curve(records, num_bins: int = DEFAULT_NUM_BINS
                      ) -> list[tuple[float, float, float, int]]:
    """Per occupied bin: (bin center, mean predicted prob, empirical
    positive frequency, count).  Empty bins are omitted."""
    if num_bins < 1:
        raise MetricError(f"num_bins must be >= 1, got {num_bins}")
    probs, hards = _arrays(records)
    idx = _bin_indices(probs, num_bins)
    out = []
    for b in range(num_bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            continue
        out.append(((b + 0.5) / num_bins, float(probs[mask].mean()),
                    float(hards[mask].mean()), count))
    return out


def brier(records) -> float:
    """Mean squared error between probability and hard label."""
    probs, hards = _arrays(records)
    return float(np.mean((probs - hards) ** 2))


def auroc(records) -> float:
    """Area under the ROC curve by the rank statistic; ties count half.

    Equivalent to the fraction of (positive, negative) pairs ranked
    correctly, with ties worth 0.5.
    """
    probs, hards = _arrays(records)
    n_pos = int(hards.sum())
    n_neg = probs.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auroc needs both a positive and a negative record")
    order = np.argsort(probs, kind="mergesort")
    sorted_probs = probs[order]
    ranks = np.empty(probs.shape[0], dtype=np.float64)
    i = 0
    while i < sorted_probs.shape[0]:
        j = i
        while j < sorted_probs.shape[0] and sorted_probs[j] == sorted_probs[i]:
            j += 1
        # average 1-based rank across the tie group; half-integers are
        # exact in float64, so this matches pairwise counting exactly
        ranks[order[i:j]] = (i + j + 1) / 2.0
        i = j
    u = float(ranks[hards == 1.0].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def roc_curve(records) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) points, one per distinct probability, with
    anchors (0,0,inf) and ending at (1,1,min prob).  Trapezoidal area
    under these points reproduces `auroc` including tie handling."""
    probs, hards = _arrays(records)
    n_pos = int(hards.sum())
    n_neg = probs.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc_curve needs both a positive and a negative record")
    order = np.argsort(-probs, kind="mergesort")
    points = [(0.0, 0.0, math.inf)]
    tp = fp = 0
    i = 0
    while i < order.shape[0]:
        v = probs[order[i]]
        j = i
        while j < order.shape[0] and probs[order[j]] == v:
            if hards[order[j]] == 1.0:
                tp += 1
            else:
                fp += 1
            j += 1
        points.append((fp / n_neg, tp / n_pos, float(v)))
        i = j
    return points


def roc_auc_trapezoid(points) -> float:
    area = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def classification_metrics(records, threshold: float = DEFAULT_THRESHOLD
                           ) -> tuple[float, float, float]:
    """(recall, f1, accuracy) for the positive class at the threshold.

    Zero-denominator cases return 0.0 and emit DegenerateMetricWarning
    instead of raising.
    """
    probs, hards = _arrays(records)
    preds = probs >= threshold
    actual = hards == 1.0
    tp = int(np.sum(preds & actual))
    fp = int(np.sum(preds & ~actual))
    fn = int(np.sum(~preds & actual))
    n = probs.shape[0]
    accuracy = (n - fp - fn) / n
    if tp + fn == 0:
        warnings.warn("no positive records; recall reported as 0.0",
                      DegenerateMetricWarning, stacklevel=2)
        recall = 0.0
    else:
        recall = tp / (tp + fn)
    if 2 * tp + fp + fn == 0:
        warnings.warn("no positive records or predictions; f1 reported as 0.0",
                      DegenerateMetricWarning, stacklevel=2)
        f1 = 0.0
    else:
        f1 = 2 * tp / (2 * tp + fp + fn)
    return recall, f1, accuracy


@dataclass
class CalibrationReport:
    """Scalar metrics plus the reliability and ROC point sets."""

    ece: float
    brier: float
    auroc: float
    recall: float
    f1: float
    accuracy: float
    num_bins: int
    threshold: float
    count: int
    reliability_points: list[tuple[float, float, float, int]] = field(default_factory=list)
    roc_points: list[tuple[float, float, float]] = field(default_factory=list)

    @classmethod
    def compute(cls, records, num_bins: int = DEFAULT_NUM_BINS,
                threshold: float = DEFAULT_THRESHOLD) -> "CalibrationReport":
        recall, f1, accuracy = classification_metrics(records, threshold)
        return cls(
            ece=ece(records, num_bins),
            brier=brier(records),
            auroc=auroc(records),
            recall=recall,
            f1=f1,
            accuracy=accuracy,
            num_bins=num_bins,
            threshold=threshold,
            count=len(records),
            reliability_points=reliability_curve(records, num_bins),
            roc_points=roc_curve(records),
        )

    def scalars(self) -> dict[str, float]:
        return {"ece": self.ece, "brier": self.brier, "auroc": self.auroc,
                "recall": self.recall, "f1": self.f1, "accuracy": self.accuracy}

    def write_json(self, path) -> None:
        payload = dict(self.scalars())
        payload.update({"num_bins": self.num_bins, "threshold": self.threshold,
                        "count": self.count})
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_reliability_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("bin_center,mean_prob,positive_frequency,count\n")
            for center, mean_prob, freq, count in self.reliability_points:
                fh.write(f"{center!r},{mean_prob!r},{freq!r},{count}\n")

    def write_roc_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("fpr,tpr,threshold\n")
            for fpr, tpr, thr in self.roc_points:
                thr_s = "inf" if math.isinf(thr) else repr(thr)
                fh.write(f"{fpr!r},{tpr!r},{thr_s}\n")
