"""Precision/recall, AP and mAP, scoring rules and calibration error."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np

from .data import DetectionSet, GroundTruthSet
from .exceptions import ParameterError
from .matching import LabeledDetections, match

__all__ = [
    "COCO_THRESHOLDS",
    "LOG_EPS",
    "PRCurve",
    "MapResult",
    "rank_order",
    "pr_curve",
    "pr_curve_from_ranked",
    "average_precision",
    "ap_from_scores",
    "ap_est",
    "map_metric",
    "brier_loss",
    "log_loss",
    "abs_diff_loss",
    "ece",
    "bin_indices",
    "bootstrap_ci",
    "reliability_table",
]

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
LOG_EPS = 1e-7
_RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class PRCurve:
    """Precision and recall after each of the first ``i`` ranked detections."""

    precision: np.ndarray
    recall: np.ndarray
    gt_count: int

    def __len__(self):
        return len(self.precision)

    @property
    def points(self) -> list[tuple[int, float, float]]:
        return [(i + 1, float(p), float(r)) for i, (p, r) in enumerate(zip(self.precision, self.recall))]


def rank_order(confidences) -> np.ndarray:
    """Indices sorting by confidence descending, ties by position ascending."""
    confidences = np.asarray(confidences, dtype=float)
    return np.lexsort((np.arange(len(confidences)), -confidences))


def pr_curve_from_ranked(tp_ranked, gt_count: int) -> PRCurve:
    tp = np.asarray(tp_ranked, dtype=float)
    cum = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    precision = cum / ranks if len(tp) else np.zeros(0)
    recall = cum / gt_count if gt_count > 0 else np.zeros(len(tp))
    return PRCurve(precision, recall, int(gt_count))


def pr_curve(labeled: LabeledDetections, category: Hashable) -> PRCurve:
    conf, _, tp = labeled.samples(category)
    return pr_curve_from_ranked(tp[rank_order(conf)], labeled.gt_count(category))


def _split(a):
    c = 134217729.0 * a  # 2**27 + 1
    hi = c - (c - a)
    return hi, a - hi


def _ratio_sum(num: np.ndarray, den: np.ndarray) -> float:
    """Correctly rounded ``sum(num / den)`` for integer-valued float arrays.

    Each quotient is paired with its rounding residual (Dekker's exact
    product), and ``math.fsum`` adds all of them without further loss.
    """
    q = num / den
    prod = q * den
    (qh, ql), (dh, dl) = _split(q), _split(den)
    prod_err = ((qh * dh - prod) + qh * dl + ql * dh) + ql * dl
    resid = ((num - prod) - prod_err) / den
    return math.fsum(np.concatenate([q, resid]))


def average_precision(curve: PRCurve, mode: str = "raw") -> Optional[float]:
    """AP of a PR curve; ``None`` when the category has no ground truth.

    ``raw`` sums precision times recall increment over ranks. ``interp101``
    samples the right-maximum precision envelope at recall 0.00, 0.01, ...,
    1.00 and averages, as the COCO evaluator does.
    """
    if curve.gt_count <= 0:
        return None
    if len(curve) == 0:
        return 0.0
    if mode == "raw":
        # recall grows by exactly 1/|G| at every TP rank; sum k / (rank * |G|) exactly
        delta = np.diff(curve.recall, prepend=0.0) > 0
        ranks = np.flatnonzero(delta) + 1.0
        hits = np.arange(1.0, len(ranks) + 1)
        return _ratio_sum(hits, ranks * curve.gt_count)
    if mode == "interp101":
        envelope = np.maximum.accumulate(curve.precision[::-1])[::-1]
        pos = np.searchsorted(curve.recall, _RECALL_POINTS, side="left")
        sampled = np.where(pos < len(envelope), envelope[np.minimum(pos, len(envelope) - 1)], 0.0)
        return float(np.mean(sampled))
    raise ParameterError(f"unknown AP mode {mode!r}; expected 'raw' or 'interp101'")


def ap_from_scores(confidences, tp, gt_count: int, mode: str = "raw") -> Optional[float]:
    """AP of detections ranked by ``confidences`` with fixed TP labels."""
    tp = np.asarray(tp, dtype=float)
    return average_precision(pr_curve_from_ranked(tp[rank_order(confidences)], gt_count), mode)


def ap_est(labeled: LabeledDetections, category: Hashable) -> Optional[float]:
    """Raw (non-interpolated) AP over all available detections of ``category``."""
    return average_precision(pr_curve(labeled, category), "raw")


@dataclass
class MapResult:
    map: float
    map50: float
    per_class: dict = field(default_factory=dict)
    thresholds: tuple = COCO_THRESHOLDS
    mode: str = "interp101"


def map_metric(
    det: DetectionSet,
    gt: GroundTruthSet,
    thresholds: Sequence[float] = COCO_THRESHOLDS,
    mode: str = "interp101",
    max_dets: Optional[int] = 100,
) -> MapResult:
    """mAP over IoU thresholds and categories with ground truth, plus mAP50.

    ``per_class`` maps category -> {threshold: AP}. Categories without any
    non-crowd ground truth are left out of both averages.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds:
        raise ParameterError("thresholds must be non-empty")
    for t in thresholds:
        if not (0.0 < t <= 1.0):
            raise ParameterError(f"IoU threshold {t} outside (0, 1]")
    categories = [c for c in gt.categories if gt.count(c) > 0]
    if not categories:
        raise ParameterError("empty ground truth: no category has any object")

    needed = sorted(set(thresholds) | {0.5})
    per_class: dict = {c: {} for c in categories}
    for t in needed:
        labeled = match(det, gt, t, max_dets)
        for c in categories:
            per_class[c][t] = average_precision(pr_curve(labeled, c), mode)

    class_means = [float(np.mean([per_class[c][t] for t in thresholds])) for c in categories]
    result_map = float(np.mean(class_means))
    map50 = float(np.mean([per_class[c][0.5] for c in categories]))
    if 0.5 not in thresholds:
        for c in categories:
            per_class[c].pop(0.5)
    return MapResult(result_map, map50, per_class, thresholds, mode)


# ---------------------------------------------------------------------------
# scoring rules


def _pairs(confidences, labels):
    c = np.asarray(confidences, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if c.size == 0:
        raise ParameterError("need at least one sample")
    if c.shape != y.shape:
        raise ParameterError("confidences and labels differ in length")
    return c, y


def brier_loss(confidences, labels) -> float:
    c, y = _pairs(confidences, labels)
    return float(np.mean((c - y) ** 2))


def log_loss(confidences, labels, eps: float = LOG_EPS) -> float:
    c, y = _pairs(confidences, labels)
    c = np.clip(c, eps, 1.0 - eps)
    return float(-np.mean(y * np.log(c) + (1.0 - y) * np.log1p(-c)))


def abs_diff_loss(confidences, labels) -> float:
    """Mean absolute deviation; not a proper scoring rule."""
    c, y = _pairs(confidences, labels)
    return float(np.mean(np.abs(c - y)))


def bin_indices(confidences, n_bins: int) -> np.ndarray:
    """Equal-width bin index on (0, 1], bin m covering ((m)/n, (m+1)/n]."""
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.searchsorted(edges, np.asarray(confidences, dtype=float), side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


def ece(confidences, labels, n_bins: int = 10) -> float:
    """Mean over samples of |confidence - empirical precision of its bin|."""
    if n_bins < 1:
        raise ParameterError("n_bins must be >= 1")
    c, y = _pairs(confidences, labels)
    b = bin_indices(c, n_bins)
    counts = np.bincount(b, minlength=n_bins)
    hits = np.bincount(b, weights=y, minlength=n_bins)
    precision = np.divide(hits, counts, out=np.zeros(n_bins), where=counts > 0)
    return float(np.mean(np.abs(c - precision[b])))


def bootstrap_ci(samples, n_boot: int = 1000, alpha: float = 0.05, seed=0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of ``samples``."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ParameterError("need at least one sample")
    if n_boot < 1:
        raise ParameterError("n_boot must be >= 1")
    if not (0.0 < alpha <= 1.0):
        raise ParameterError("alpha must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    means = np.empty(n_boot)
    chunk = max(1, 2_000_000 // x.size)
    for start in range(0, n_boot, chunk):
        stop = min(n_boot, start + chunk)
        idx = rng.integers(0, x.size, size=(stop - start, x.size))
        means[start:stop] = x[idx].mean(axis=1)
    lo, hi = np.quantile(means, [alpha / 2.0, 1.0 - alpha / 2.0])
    return float(lo), float(hi)


def reliability_table(confidences, labels, n_bins: int = 10, n_boot: int = 1000, alpha: float = 0.05, seed=0):
    """Rows ``(bin, mean_conf, precision, ci_lo, ci_hi, count)`` for non-empty bins.

    With ``n_boot == 0`` the interval columns are ``None``.
    """
    c, y = _pairs(confidences, labels)
    b = bin_indices(c, n_bins)
    rows = []
    for m in range(n_bins):
        mask = b == m
        n = int(mask.sum())
        if n == 0:
            continue
        if n_boot > 0:
            lo, hi = bootstrap_ci(y[mask], n_boot, alpha, seed=(seed, m))
        else:
            lo = hi = None
        rows.append((m, float(c[mask].mean()), float(y[mask].mean()), lo, hi, n))
    return rows
