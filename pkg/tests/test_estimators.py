import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from boxcal.calibration import BinningConfig, apply_curve, fit_conditional_samples, fit_curve
from boxcal.estimators import ConditionalCalibrationSearch, ConditionalCalibrator, HistogramCalibrator
from boxcal.search import SearchGrid, search

from _util import biased_samples, labeled


def test_histogram_calibrator_matches_functional_api():
    conf, _, tp = biased_samples(500, 0)
    est = HistogramCalibrator(n_conf_bins=6).fit(conf.reshape(-1, 1), tp)
    expected = apply_curve(fit_curve(conf, tp, BinningConfig.modified(6)), conf)
    np.testing.assert_array_equal(est.transform(conf), expected)
    np.testing.assert_array_equal(est.predict(conf.reshape(-1, 1)), expected)


def test_params_round_trip_and_clone():
    est = ConditionalCalibrator(n_box_bins=3, scheme="equal_width", interpolation="step")
    params = est.get_params()
    assert params["n_box_bins"] == 3 and params["scheme"] == "equal_width"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(n_box_bins=4)
    assert est.n_box_bins == 4


def test_not_fitted_and_bad_input():
    with pytest.raises(NotFittedError):
        HistogramCalibrator().transform([0.5])
    with pytest.raises(ValueError):
        ConditionalCalibrator().fit(np.ones((10, 3)), np.ones(10))
    with pytest.raises(ValueError):
        HistogramCalibrator(n_conf_bins=1).fit([0.2, 0.4], [0, 2])
    with pytest.raises(ValueError):
        HistogramCalibrator(n_conf_bins=1).fit([0.2, 0.4, 0.5], [0, 1])


def test_conditional_calibrator_matches_functional_api():
    conf, areas, tp = biased_samples(800, 1)
    X = np.column_stack([conf, areas])
    est = ConditionalCalibrator(n_box_bins=2, n_conf_bins=8).fit(X, tp)
    cc = fit_conditional_samples(conf, areas, tp, 2, BinningConfig.modified(8))
    np.testing.assert_array_equal(est.transform(X), cc.apply(conf, areas))


def test_search_estimator_agrees_with_search():
    conf, areas, tp = biased_samples(1500, 2)
    X = np.column_stack([conf, areas])
    est = ConditionalCalibrationSearch(box_bins=(2, 3), conf_bins=(4, 8), k_folds=3, seed=5).fit(X, tp)
    res = search(labeled(conf, areas, tp), SearchGrid((2, 3), (4, 8)), "mse_hat", 3, 5)
    B, C = res.chosen[1]
    assert est.best_params_ == {"n_box_bins": B, "n_conf_bins": C}
    np.testing.assert_array_equal(est.transform(X), res.calibration_map.categories[1].apply(conf, areas))
    assert len(est.cell_scores_) == 4
