import numpy as np
import pytest

from boxcal.calibration import BinningConfig, fit_curve
from boxcal.exceptions import ConsistencyError, GenerationError, ParameterError
from boxcal.matching import match
from boxcal.metrics import reliability_table
from boxcal.synth import SubgroupSpec, generate, generate_tta, relabel_with_matching


def test_spec_validation():
    with pytest.raises(ParameterError):
        SubgroupSpec((10, 5))
    with pytest.raises(ParameterError):
        SubgroupSpec((1, 5), gamma=0)
    with pytest.raises(ParameterError):
        SubgroupSpec((1, 5), confidence_distribution=("uniform", 0.2, 1.5))
    with pytest.raises(ParameterError):
        SubgroupSpec((1, 5), confidence_distribution=("cauchy", 0, 1))


def test_deterministic_per_seed():
    specs = [SubgroupSpec((50, 400), 2.0, 300)]
    a, b, c = generate(specs, 10, seed=1), generate(specs, 10, seed=1), generate(specs, 10, seed=2)
    assert a.det == b.det and a.gt == b.gt and np.array_equal(a.true_p, b.true_p)
    assert a.det != c.det


def test_truth_and_padding():
    specs = [SubgroupSpec((50, 400), 2.0, 500), SubgroupSpec((1000, 2000), 0.5, 500, ("beta", 2.0, 1.0))]
    s = generate(specs, 20, seed=3, pad_fraction=0.1)
    conf = s.det.confidences
    np.testing.assert_allclose(s.true_p[s.subgroup == 0], conf[s.subgroup == 0] ** 2.0)
    np.testing.assert_allclose(s.true_p[s.subgroup == 1], conf[s.subgroup == 1] ** 0.5)
    n_tp = int(s.labels.sum())
    assert len(s.gt) == n_tp + round(0.1 * n_tp)
    areas = s.det.areas
    assert np.all((areas[s.subgroup == 0] > 49.99) & (areas[s.subgroup == 0] < 400.01))
    doc = s.truth_dict()
    assert len(doc["true_p"]) == len(s.det) and doc["specs"][1]["true_curve"] == {"family": "power", "gamma": 0.5}


@pytest.mark.parametrize("t_iou", [0.5, 1.0])
def test_geometric_matching_reproduces_labels(t_iou):
    s = generate([SubgroupSpec((20, 900), 1.0, 2000)], 40, seed=4)
    lab = relabel_with_matching(s, t_iou)
    assert np.array_equal(lab.tp, s.labels)


def test_all_tp_scene():
    s = generate([SubgroupSpec((20, 900), 1.0, 200, ("uniform", 0.9999, 1.0))], 5, seed=0)
    # c**1 with c ~ 1: essentially every detection is a TP
    lab = relabel_with_matching(s)
    assert lab.tp.mean() > 0.99


def test_mismatch_is_reported():
    s = generate([SubgroupSpec((20, 900), 1.0, 200)], 5, seed=0)
    broken = type(s)(s.gt, s.det, s.true_p, ~s.labels, s.subgroup, s.specs)
    with pytest.raises(ConsistencyError):
        relabel_with_matching(broken)


def test_overfull_images_raise():
    with pytest.raises(GenerationError, match="n_images"):
        generate([SubgroupSpec((10_000, 20_000), 1.0, 5000)], 1, image_size=(1000, 1000))


def test_identity_curve_is_calibrated():
    s = generate([SubgroupSpec((20, 400), 1.0, 100_000)], 500, seed=6)
    rows = reliability_table(s.det.confidences, s.labels.astype(float), n_bins=10, n_boot=200, seed=0)
    inside = sum(lo <= m <= hi for _, m, _, lo, hi, _ in rows)
    assert inside >= 9


def test_tp_rate_per_decile_within_three_sigma():
    s = generate([SubgroupSpec((20, 400), 2.0, 50_000), SubgroupSpec((500, 900), 0.5, 50_000)], 500, seed=7)
    c = s.det.confidences
    for g in (0, 1):
        for d in range(10):
            m = (s.subgroup == g) & (c > d / 10) & (c <= (d + 1) / 10)
            expected = s.true_p[m].mean()
            sigma = np.sqrt(expected * (1 - expected) / m.sum())
            assert m.sum() >= 1000 and abs(s.labels[m].mean() - expected) <= 3 * sigma


def test_subgroup_curves_recovered():
    s = generate([SubgroupSpec((20, 400), 2.0, 100_000), SubgroupSpec((500, 900), 0.5, 100_000)], 2000, seed=8)
    c = s.det.confidences
    for g, gamma in ((0, 2.0), (1, 0.5)):
        m = s.subgroup == g
        curve = fit_curve(c[m], s.labels[m], BinningConfig.modified(10))
        inner = (curve.x > 0) & (curve.x < 1)
        assert np.max(np.abs(curve.y[inner] - curve.x[inner] ** gamma)) < 0.05


def test_tta_scene_shares_objects():
    d = ("beta", 2.0, 0.5)
    runs = {"a": [SubgroupSpec((50, 400), 2.0, 300, d)], "b": [SubgroupSpec((50, 400), 0.5, 300, d)]}
    s = generate_tta(runs, 10, seed=0)
    for tag, det in s.runs.items():
        assert np.array_equal(match(det, s.gt).tp, s.labels[tag])
    boxes_a = {(x.image_id, x.bbox) for x, t in zip(s.runs["a"], s.labels["a"]) if t}
    boxes_b = {(x.image_id, x.bbox) for x, t in zip(s.runs["b"], s.labels["b"]) if t}
    assert boxes_a & boxes_b
    with pytest.raises(ParameterError):
        generate_tta({"a": [SubgroupSpec((1, 2))], "b": [SubgroupSpec((1, 3))]}, 2)
