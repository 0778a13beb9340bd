"""scikit-learn compatible wrappers around the calibration fitters.

``X`` holds confidences (one column) or ``[confidence, box_area]`` pairs
(two columns); ``y`` holds the 0/1 TP labels from matching.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted, column_or_1d

from .calibration import BinningConfig, apply_curve, fit_conditional_samples, fit_curve
from .exceptions import ParameterError
from .search import OBJECTIVES, SearchGrid, _best, _CategorySearch, _Samples

__all__ = ["HistogramCalibrator", "ConditionalCalibrator", "ConditionalCalibrationSearch"]


class _BinningParams:
    def _binning(self, n_conf_bins=None) -> BinningConfig:
        return BinningConfig(
            self.n_conf_bins if n_conf_bins is None else n_conf_bins,
            self.scheme,
            self.interpolation,
            self.anchored_bounds,
            self.support_x,
            self.min_samples_per_bin,
        )


def _check_labels(y, n):
    y = column_or_1d(np.asarray(y), warn=True).astype(float)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    check_consistent_length(np.empty(n), y)
    return y


def _check_conf(X):
    X = check_array(X, ensure_2d=False, dtype=float)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError(f"expected a single confidence column, got {X.shape[1]}")
        X = X[:, 0]
    return X


def _check_conf_area(X):
    X = check_array(X, dtype=float)
    if X.shape[1] != 2:
        raise ValueError(f"expected columns [confidence, box_area], got {X.shape[1]} columns")
    return X[:, 0], X[:, 1]


class HistogramCalibrator(_BinningParams, TransformerMixin, BaseEstimator):
    """Histogram-binning calibrator over a single confidence column."""

    def __init__(
        self,
        n_conf_bins=10,
        scheme="quantile",
        interpolation="linear",
        anchored_bounds=True,
        support_x="mean_confidence",
        min_samples_per_bin=2,
    ):
        self.n_conf_bins = n_conf_bins
        self.scheme = scheme
        self.interpolation = interpolation
        self.anchored_bounds = anchored_bounds
        self.support_x = support_x
        self.min_samples_per_bin = min_samples_per_bin

    def fit(self, X, y):
        c = _check_conf(X)
        y = _check_labels(y, len(c))
        self.curve_ = fit_curve(c, y, self._binning())
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "curve_")
        return np.asarray(apply_curve(self.curve_, _check_conf(X)), dtype=float)

    def predict(self, X):
        return self.transform(X)


class ConditionalCalibrator(_BinningParams, TransformerMixin, BaseEstimator):
    """One histogram calibrator per box-area subgroup (area quantiles k/B)."""

    def __init__(
        self,
        n_box_bins=2,
        n_conf_bins=10,
        scheme="quantile",
        interpolation="linear",
        anchored_bounds=True,
        support_x="mean_confidence",
        min_samples_per_bin=2,
    ):
        self.n_box_bins = n_box_bins
        self.n_conf_bins = n_conf_bins
        self.scheme = scheme
        self.interpolation = interpolation
        self.anchored_bounds = anchored_bounds
        self.support_x = support_x
        self.min_samples_per_bin = min_samples_per_bin

    def fit(self, X, y):
        c, a = _check_conf_area(X)
        y = _check_labels(y, len(c))
        self.calibration_ = fit_conditional_samples(c, a, y, int(self.n_box_bins), self._binning())
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "calibration_")
        c, a = _check_conf_area(X)
        return self.calibration_.apply(c, a)

    def predict(self, X):
        return self.transform(X)


class ConditionalCalibrationSearch(_BinningParams, TransformerMixin, BaseEstimator):
    """Grid search over (B, C) for a single category, then refit on all data.

    ``gt_count`` passed to :meth:`fit` is the number of ground-truth objects
    the AP objectives divide by; it defaults to the number of positive labels.
    """

    def __init__(
        self,
        box_bins=(2, 3, 4, 5, 6),
        conf_bins=(4, 5, 6, 8, 10, 12, 14),
        objective="mse_hat",
        k_folds=5,
        seed=0,
        absolute_bias=False,
        n_conf_bins=10,
        scheme="quantile",
        interpolation="linear",
        anchored_bounds=True,
        support_x="mean_confidence",
        min_samples_per_bin=2,
    ):
        self.box_bins = box_bins
        self.conf_bins = conf_bins
        self.objective = objective
        self.k_folds = k_folds
        self.seed = seed
        self.absolute_bias = absolute_bias
        self.n_conf_bins = n_conf_bins
        self.scheme = scheme
        self.interpolation = interpolation
        self.anchored_bounds = anchored_bounds
        self.support_x = support_x
        self.min_samples_per_bin = min_samples_per_bin

    def fit(self, X, y, gt_count=None):
        if self.objective not in OBJECTIVES:
            raise ParameterError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        c, a = _check_conf_area(X)
        y = _check_labels(y, len(c))
        gt = int(y.sum()) if gt_count is None else int(gt_count)
        grid = SearchGrid(self.box_bins, self.conf_bins, self._binning())
        cs = _CategorySearch(_Samples(c, a, y, gt), grid)
        self.cell_scores_ = cs.score_all(self.objective, self.k_folds, self.seed, self.absolute_bias)
        best = _best(self.cell_scores_)
        if best is None:
            raise ParameterError("no feasible (B, C) cell for these samples")
        self.best_params_ = {"n_box_bins": best.B, "n_conf_bins": best.C}
        self.best_score_ = best.metric_value
        params = {k: v for k, v in self.get_params().items() if k in ConditionalCalibrator().get_params()}
        params.update(self.best_params_)
        self.best_estimator_ = ConditionalCalibrator(**params).fit(X, y)
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "best_estimator_")
        return self.best_estimator_.transform(X)

    def predict(self, X):
        return self.transform(X)
