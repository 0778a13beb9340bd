"""Per-category grid search over (box bins B, confidence bins C).

Every cell of the grid is a candidate conditional calibration. Cells are
scored on the calibration split with one of several objectives; the
estimated-MSE objective combines a K-fold variance estimate with a bias
proxy: how far a cell's mean shift away from the unconditional curve
falls short of the largest shift seen anywhere on the grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Hashable, NamedTuple, Optional, Sequence

import numpy as np

from .calibration import BinningConfig, CalibrationMap, ConditionalCalibration, fit_conditional_samples
from .data import _id_key
from .exceptions import InvalidCellError, ParameterError
from .matching import LabeledDetections
from .metrics import abs_diff_loss, ap_from_scores, brier_loss, ece, log_loss

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_BOX_BINS",
    "DEFAULT_CONF_BINS",
    "OBJECTIVES",
    "SearchGrid",
    "CellScore",
    "SearchResult",
    "score_cell",
    "estimate_variance",
    "estimate_bias",
    "estimate_mse",
    "search",
    "oracle_select",
    "fit_map",
]

DEFAULT_BOX_BINS = (2, 3, 4, 5, 6)
DEFAULT_CONF_BINS = (4, 5, 6, 8, 10, 12, 14)
OBJECTIVES = ("ap", "ap_est", "brier", "log", "abs_diff", "ece", "mse_hat")


@dataclass(frozen=True)
class SearchGrid:
    box_bins: tuple = DEFAULT_BOX_BINS
    conf_bins: tuple = DEFAULT_CONF_BINS
    binning: BinningConfig = field(default_factory=BinningConfig)

    def __post_init__(self):
        object.__setattr__(self, "box_bins", tuple(sorted(int(b) for b in self.box_bins)))
        object.__setattr__(self, "conf_bins", tuple(sorted(int(c) for c in self.conf_bins)))
        if not self.box_bins or not self.conf_bins:
            raise ParameterError("grid axes must be non-empty")
        if min(self.box_bins) < 1 or min(self.conf_bins) < 1:
            raise ParameterError("grid values must be >= 1")

    def cells(self) -> list[tuple[int, int]]:
        """Cells in tie-break order: smallest B first, then smallest C."""
        return [(b, c) for b in self.box_bins for c in self.conf_bins]

    def config(self, n_conf_bins: int) -> BinningConfig:
        return self.binning.with_bins(n_conf_bins)

    def to_dict(self) -> dict:
        return {"box_bins": list(self.box_bins), "conf_bins": list(self.conf_bins), "binning": self.binning.to_dict()}


@dataclass
class CellScore:
    """Score of one grid cell; smaller ``metric_value`` is always better."""

    B: int
    C: int
    metric_value: Optional[float]
    feasible: bool
    bias_hat: Optional[float] = None
    variance: Optional[float] = None
    reason: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"B": self.B, "C": self.C, "feasible": self.feasible, "metric_value": self.metric_value}
        if self.bias_hat is not None:
            d["bias_hat"] = self.bias_hat
            d["variance"] = self.variance
        if self.reason:
            d["reason"] = self.reason
        return d


@dataclass
class SearchResult:
    objective: str
    chosen: dict
    scores: dict
    calibration_map: CalibrationMap

    def to_dict(self) -> dict:
        cats = sorted(self.scores, key=_id_key)
        return {
            "objective": self.objective,
            "categories": [
                {
                    "category_id": c,
                    "chosen": list(self.chosen[c]) if self.chosen.get(c) else None,
                    "fallback": self.chosen.get(c) is None,
                    "cells": [s.to_dict() for s in self.scores[c]],
                }
                for c in cats
            ],
        }


class _Samples(NamedTuple):
    conf: np.ndarray
    area: np.ndarray
    tp: np.ndarray
    gt_count: int


def _samples(labeled: LabeledDetections, category) -> _Samples:
    conf, area, tp = labeled.samples(category)
    return _Samples(conf, area, tp, labeled.gt_count(category))


def estimate_mse(bias_hat: float, variance: float) -> float:
    if bias_hat < 0 or variance < 0:
        raise ParameterError("bias_hat and variance must be non-negative")
    return bias_hat * bias_hat + variance


def _loss(objective: str, calibrated: np.ndarray, s: _Samples) -> float:
    if objective in ("ap", "ap_est"):
        ap = ap_from_scores(calibrated, s.tp, s.gt_count, "interp101" if objective == "ap" else "raw")
        return -(ap or 0.0)
    if objective == "brier":
        return brier_loss(calibrated, s.tp)
    if objective == "log":
        return log_loss(calibrated, s.tp)
    if objective == "abs_diff":
        return abs_diff_loss(calibrated, s.tp)
    if objective == "ece":
        return ece(calibrated, s.tp, 10)
    raise ParameterError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")


def _fold_ids(n: int, k_folds: int, seed) -> np.ndarray:
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.empty(n, dtype=np.intp)
    ids[perm] = np.arange(n) % k_folds
    return ids


def _variance(s: _Samples, B: int, config: BinningConfig, k_folds: int, seed, folds=None) -> float:
    if folds is None:
        if k_folds < 2:
            raise ParameterError("k_folds must be >= 2")
        folds = _fold_ids(len(s.conf), k_folds, seed)
    folds = np.asarray(folds)
    fold_values = np.unique(folds)
    if len(fold_values) < 2:
        raise ParameterError("need at least two folds")
    preds = np.empty((len(fold_values), len(s.conf)))
    for r, k in enumerate(fold_values):
        train = folds != k
        cc = fit_conditional_samples(s.conf[train], s.area[train], s.tp[train], B, config)
        preds[r] = cc.apply(s.conf, s.area)
    return float(np.mean(np.var(preds, axis=0)))


def estimate_variance(
    calib_data: LabeledDetections,
    category,
    B: int,
    C: int,
    k_folds: int = 5,
    seed=0,
    config: Optional[BinningConfig] = None,
    folds: Optional[Sequence[int]] = None,
) -> float:
    """Mean over the category's detections of the spread of K fold-wise calibrated confidences.

    Fold ``k``'s calibrator is fitted on every detection outside fold ``k``
    and then applied to all detections. ``folds`` overrides the seeded
    detection-level assignment.
    """
    config = (config or BinningConfig()).with_bins(C)
    return _variance(_samples(calib_data, category), B, config, k_folds, seed, folds)


class _CategorySearch:
    """Fits and caches every cell of the grid for one category."""

    def __init__(self, s: _Samples, grid: SearchGrid, category=None):
        self.s = s
        self.grid = grid
        self.category = category
        self._fits: dict = {}

    def fit(self, B: int, C: int) -> ConditionalCalibration:
        key = (B, C)
        if key not in self._fits:
            try:
                cc = fit_conditional_samples(self.s.conf, self.s.area, self.s.tp, B, self.grid.config(C), self.category)
                self._fits[key] = (cc, cc.apply(self.s.conf, self.s.area))
            except InvalidCellError as exc:
                self._fits[key] = exc
        entry = self._fits[key]
        if isinstance(entry, Exception):
            raise entry
        return entry[0]

    def calibrated(self, B: int, C: int) -> np.ndarray:
        self.fit(B, C)
        return self._fits[(B, C)][1]

    def feasible(self, B: int, C: int) -> bool:
        try:
            self.fit(B, C)
            return True
        except InvalidCellError:
            return False

    def mean_shift(self, B: int, C: int, absolute: bool) -> float:
        diff = self.calibrated(B, C) - self.calibrated(1, C)
        return float(np.mean(np.abs(diff) if absolute else diff))

    def shift_table(self, absolute: bool) -> dict:
        table = {}
        for B, C in self.grid.cells():
            if self.feasible(B, C) and self.feasible(1, C):
                table[(B, C)] = self.mean_shift(B, C, absolute)
        return table

    def bias(self, B: int, C: int, absolute: bool, table=None) -> float:
        table = self.shift_table(absolute) if table is None else table
        if (B, C) not in table:
            # raise the underlying reason
            self.fit(B, C)
            self.fit(1, C)
        return max(table.values()) - table[(B, C)]

    def score(self, B, C, objective, k_folds=5, seed=0, absolute=False, table=None) -> CellScore:
        try:
            self.fit(B, C)
            if objective == "mse_hat":
                bias = self.bias(B, C, absolute, table)
                var = _variance(self.s, B, self.grid.config(C), k_folds, seed)
                return CellScore(B, C, estimate_mse(bias, var), True, bias, var)
            return CellScore(B, C, _loss(objective, self.calibrated(B, C), self.s), True)
        except InvalidCellError as exc:
            return CellScore(B, C, None, False, reason=str(exc))

    def score_all(self, objective, k_folds=5, seed=0, absolute=False) -> list[CellScore]:
        table = self.shift_table(absolute) if objective == "mse_hat" else None
        return [self.score(B, C, objective, k_folds, seed, absolute, table) for B, C in self.grid.cells()]


def _best(scores: list[CellScore]) -> Optional[CellScore]:
    best = None
    for sc in scores:
        if sc.feasible and (best is None or sc.metric_value < best.metric_value):
            best = sc
    return best


def estimate_bias(
    calib_data: LabeledDetections,
    category,
    B: int,
    C: int,
    grid: Optional[SearchGrid] = None,
    config: Optional[BinningConfig] = None,
    absolute: bool = False,
) -> float:
    """Largest mean shift from the unconditional curve on the grid, minus this cell's shift."""
    grid = grid or SearchGrid(binning=config or BinningConfig())
    if config is not None:
        grid = replace(grid, binning=config)
    return _CategorySearch(_samples(calib_data, category), grid, category).bias(B, C, absolute)


def score_cell(
    calib_data: LabeledDetections,
    category,
    B: int,
    C: int,
    objective: str = "mse_hat",
    grid: Optional[SearchGrid] = None,
    config: Optional[BinningConfig] = None,
    k_folds: int = 5,
    seed=0,
    absolute_bias: bool = False,
) -> CellScore:
    """Fit cell (B, C) on ``calib_data``, apply it to the same data and score it.

    AP objectives are negated so that smaller is better for every objective.
    ``grid`` is only consulted by ``mse_hat`` (for the bias term).
    """
    if objective not in OBJECTIVES:
        raise ParameterError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    grid = grid or SearchGrid(binning=config or BinningConfig())
    if config is not None:
        grid = replace(grid, binning=config)
    cs = _CategorySearch(_samples(calib_data, category), grid, category)
    return cs.score(B, C, objective, k_folds, seed, absolute_bias)


def fit_map(
    labeled: LabeledDetections, cells: dict, config: BinningConfig, t_iou: float = 0.5
) -> CalibrationMap:
    """Fit a map at fixed per-category cells; infeasible categories fall back to identity."""
    fitted, fallback = {}, []
    for cat in labeled.categories:
        cell = cells.get(cat)
        if cell is None:
            fallback.append(cat)
            continue
        B, C = cell
        try:
            conf, area, tp = labeled.samples(cat)
            fitted[cat] = fit_conditional_samples(conf, area, tp, B, config.with_bins(C), cat)
        except InvalidCellError as exc:
            log.warning("identity fallback for category %r: %s", cat, exc)
            fallback.append(cat)
    return CalibrationMap(t_iou, config, fitted, tuple(fallback))


def _assemble(objective, grid, per_cat, t_iou) -> SearchResult:
    chosen, scores, fitted, fallback = {}, {}, {}, []
    for cat, (cs, cat_scores) in per_cat.items():
        scores[cat] = cat_scores
        best = _best(cat_scores)
        if best is None:
            log.warning("no feasible cell for category %r; identity fallback", cat)
            chosen[cat] = None
            fallback.append(cat)
        else:
            chosen[cat] = (best.B, best.C)
            fitted[cat] = cs.fit(best.B, best.C)
    return SearchResult(objective, chosen, scores, CalibrationMap(t_iou, grid.binning, fitted, tuple(fallback)))


def search(
    calib_data: LabeledDetections,
    grid: Optional[SearchGrid] = None,
    objective: str = "mse_hat",
    k_folds: int = 5,
    seed=0,
    absolute_bias: bool = False,
    t_iou: Optional[float] = None,
) -> SearchResult:
    """Choose the best-scoring feasible cell per category and fit the final map on all of ``calib_data``."""
    if objective not in OBJECTIVES:
        raise ParameterError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    grid = grid or SearchGrid()
    t_iou = _t_iou(calib_data) if t_iou is None else t_iou
    per_cat = {}
    for cat in calib_data.categories:
        cs = _CategorySearch(_samples(calib_data, cat), grid, cat)
        per_cat[cat] = (cs, cs.score_all(objective, k_folds, seed, absolute_bias))
    return _assemble(objective, grid, per_cat, t_iou)


def oracle_select(
    calib_data: LabeledDetections,
    holdout_data: LabeledDetections,
    grid: Optional[SearchGrid] = None,
    ap_mode: str = "interp101",
    t_iou: Optional[float] = None,
) -> SearchResult:
    """Upper-bound selector: the cell whose calibration maximises hold-out AP.

    Fits on ``calib_data`` and peeks at ``holdout_data``; useful only to
    bound what any deployable selector could achieve.
    """
    grid = grid or SearchGrid()
    t_iou = _t_iou(calib_data) if t_iou is None else t_iou
    per_cat = {}
    for cat in calib_data.categories:
        cs = _CategorySearch(_samples(calib_data, cat), grid, cat)
        hold = _samples(holdout_data, cat)
        cat_scores = []
        for B, C in grid.cells():
            try:
                cc = cs.fit(B, C)
            except InvalidCellError as exc:
                cat_scores.append(CellScore(B, C, None, False, reason=str(exc)))
                continue
            ap = ap_from_scores(cc.apply(hold.conf, hold.area), hold.tp, hold.gt_count, ap_mode)
            cat_scores.append(CellScore(B, C, -(ap or 0.0), True))
        per_cat[cat] = (cs, cat_scores)
    return _assemble("oracle", grid, per_cat, t_iou)


def _t_iou(labeled: LabeledDetections) -> float:
    return labeled.labels[0].iou_threshold if labeled.labels else 0.5
