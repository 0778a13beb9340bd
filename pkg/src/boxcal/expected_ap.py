"""Expected AP of a detector whose TP labels are independent Bernoulli draws.

Three routes to the same number: a closed form that is linear in the
number of detections, exact enumeration of all ``2**N`` label vectors, and
Monte-Carlo sampling. The closed form also shows that ranking detections by
their TP probability, highest first, maximises the expectation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ParameterError

__all__ = [
    "MAX_ENUMERATION",
    "StochasticDetections",
    "expected_ap_closed",
    "expected_ap_terms",
    "expected_ap_enumerate",
    "expected_ap_monte_carlo",
    "optimal_order",
    "raw_ap_of_labels",
]

MAX_ENUMERATION = 20


@dataclass(frozen=True)
class StochasticDetections:
    """TP probabilities in ranking order, plus the number of ground-truth objects."""

    p: tuple[float, ...]
    gt_count: int

    def __post_init__(self):
        p = tuple(float(v) for v in self.p)
        object.__setattr__(self, "p", p)
        if any(not (0.0 < v <= 1.0) for v in p):
            raise ParameterError("every TP probability must lie in (0, 1]")
        if int(self.gt_count) < 1:
            raise ParameterError("gt_count must be >= 1")

    @property
    def n(self) -> int:
        return len(self.p)


def expected_ap_closed(s: StochasticDetections) -> float:
    """``1/|G| * sum_i p_i * (1 + sum_{k<i} p_k) / i``."""
    p = np.asarray(s.p)
    before = np.concatenate(([0.0], np.cumsum(p)[:-1]))
    ranks = np.arange(1, len(p) + 1)
    return float(np.sum((before + 1.0) / ranks * p) / s.gt_count)


def expected_ap_terms(s: StochasticDetections) -> np.ndarray:
    """Per-rank contributions ``h_i = p_i / i + p_i * sum_{k>i} p_k / k`` (unnormalised)."""
    p = np.asarray(s.p)
    ranks = np.arange(1, len(p) + 1)
    weighted = p / ranks
    after = np.concatenate((np.cumsum(weighted[::-1])[::-1][1:], [0.0]))
    return weighted + p * after


def raw_ap_of_labels(labels: np.ndarray, gt_count: int) -> np.ndarray:
    """Raw AP of each row of a 0/1 label matrix already in rank order."""
    labels = np.atleast_2d(np.asarray(labels, dtype=float))
    ranks = np.arange(1, labels.shape[1] + 1)
    precision = np.cumsum(labels, axis=1) / ranks
    return np.sum(precision * labels, axis=1) / gt_count


def expected_ap_enumerate(s: StochasticDetections) -> float:
    """Exact expectation by summing over every label vector in ``{0,1}^N``."""
    n = s.n
    if n > MAX_ENUMERATION:
        raise ParameterError(f"enumeration limited to N <= {MAX_ENUMERATION}, got {n}")
    if n == 0:
        return 0.0
    p = np.asarray(s.p)
    total = 0.0
    # chunks of 2**16 outcomes keep memory flat for N up to 20
    block = 1 << min(n, 16)
    bits = np.arange(n)
    for start in range(0, 1 << n, block):
        codes = np.arange(start, start + block, dtype=np.int64)
        labels = ((codes[:, None] >> bits) & 1).astype(float)
        prob = np.prod(np.where(labels == 1.0, p, 1.0 - p), axis=1)
        total += math.fsum(prob * raw_ap_of_labels(labels, s.gt_count))
    return total


def expected_ap_monte_carlo(s: StochasticDetections, trials: int = 100_000, seed=0) -> tuple[float, float]:
    """Sample-mean AP over ``trials`` Bernoulli label draws, with its standard error."""
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    p = np.asarray(s.p)
    chunk = max(1, 4_000_000 // max(s.n, 1))
    sums, sq = [], []
    for start in range(0, trials, chunk):
        m = min(chunk, trials - start)
        labels = rng.random((m, s.n)) < p
        ap = raw_ap_of_labels(labels, s.gt_count)
        sums.append(math.fsum(ap))
        sq.append(math.fsum(ap * ap))
    mean = math.fsum(sums) / trials
    if trials == 1:
        return mean, 0.0
    var = max(math.fsum(sq) / trials - mean * mean, 0.0) * trials / (trials - 1)
    return mean, math.sqrt(var / trials)


def optimal_order(p: Sequence[float]) -> np.ndarray:
    """Stable permutation that sorts ``p`` descending."""
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        raise ParameterError("p must be non-empty")
    return np.argsort(-p, kind="stable")
