import json
from fractions import Fraction

import numpy as np
import pytest

from boxcal.cli import main
from boxcal.data import load_detections, load_ground_truth
from boxcal.calibration import load_calibration_map
from boxcal.matching import match


def run(*args):
    try:
        return main([str(a) for a in args])
    except SystemExit as exc:
        return exc.code


@pytest.fixture
def fx(fixture_dir):
    return {
        "gt": fixture_dir / "eval_gt.json",
        "det": fixture_dir / "eval_det.json",
        "expected": json.loads((fixture_dir / "eval_expected.json").read_text()),
        "reliability": fixture_dir / "reliability_cat1_expected.csv",
    }


def _simulate(out, seed=0, n=3000):
    spec = out.parent / f"spec_{out.name}.json"
    spec.write_text(json.dumps([
        {"area_range": [64, 1024], "gamma": 2.0, "detection_count": n},
        {"area_range": [1024, 16384], "gamma": 0.5, "detection_count": n},
    ]))
    assert run("simulate", "--spec", spec, "--n-images", 60, "--seed", seed, "--out", out) == 0
    return out / "gt.json", out / "detections.json"


def test_match_fixture(tmp_path, fx):
    assert run("match", "--gt", fx["gt"], "--det", fx["det"], "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "labels.json").read_text())
    assert doc["format_version"] and doc["run_config"]["t_iou"] == 0.5
    got = {}
    for row in doc["labels"]:
        got.setdefault(str(row["category_id"]), []).append("ignored" if row["ignored"] else "tp" if row["tp"] else "fp")
    assert got == fx["expected"]["labels_at_0.5"]
    assert {e["category_id"]: e["gt_count"] for e in doc["gt_counts"]} == {1: 4, 2: 2}


def test_match_empty_and_bad_threshold(tmp_path, fx):
    empty = tmp_path / "empty.json"
    empty.write_text("[]")
    assert run("match", "--gt", fx["gt"], "--det", empty, "--out", tmp_path / "o") == 0
    assert json.loads((tmp_path / "o" / "labels.json").read_text())["labels"] == []
    assert run("match", "--gt", fx["gt"], "--det", empty, "--t-iou", 1.5, "--out", tmp_path) == 2


def test_data_error_exit_code(tmp_path, fx, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('[{"image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1], "score": 1.5}]')
    assert run("match", "--gt", fx["gt"], "--det", bad, "--out", tmp_path) == 1
    assert "score" in capsys.readouterr().err
    assert run("match", "--gt", tmp_path / "missing.json", "--det", bad, "--out", tmp_path) == 1


def test_eval_fixture_matches_hand_values(tmp_path, fx):
    exp = fx["expected"]
    for mode in ("raw", "interp101"):
        out = tmp_path / mode
        assert run("eval", "--gt", fx["gt"], "--det", fx["det"], "--mode", mode, "--out", out) == 0
        doc = json.loads((out / "metrics.json").read_text())
        for entry in doc["per_class"]:
            for t, ap in entry["ap"].items():
                want = float(Fraction(exp[mode][str(entry["category_id"])][t]))
                if mode == "raw":
                    assert ap == pytest.approx(want, abs=1e-15)
                else:
                    assert abs(ap - want) <= 1e-4
    pr = (tmp_path / "raw" / "pr_1.csv").read_text().splitlines()
    assert pr[0] == "rank,precision,recall" and pr[1] == "1,1.0,0.25" and len(pr) == 7


def test_eval_single_threshold_and_perfect(tmp_path, fx):
    assert run("eval", "--gt", fx["gt"], "--det", fx["det"], "--thresholds", 0.5, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "metrics.json").read_text())
    assert doc["map"] == doc["map50"]
    gt = json.loads(fx["gt"].read_text())
    perfect = [
        {"image_id": a["image_id"], "category_id": a["category_id"], "bbox": a["bbox"], "score": 1.0}
        for a in gt["annotations"] if not a["iscrowd"]
    ]
    p = tmp_path / "perfect.json"
    p.write_text(json.dumps(perfect))
    assert run("eval", "--gt", fx["gt"], "--det", p, "--thresholds", 0.5, "--out", tmp_path / "p") == 0
    assert json.loads((tmp_path / "p" / "metrics.json").read_text())["map"] == 1.0


def test_report_fixture_csv(tmp_path, fx):
    assert run("match", "--gt", fx["gt"], "--det", fx["det"], "--out", tmp_path) == 0
    assert run("report", "--labels", tmp_path / "labels.json", "--n-boot", 0, "--out", tmp_path / "r") == 0
    assert (tmp_path / "r" / "reliability_1.csv").read_text() == fx["reliability"].read_text()
    assert run("report", "--gt", fx["gt"], "--det", fx["det"], "--n-boot", 200, "--out", tmp_path / "ci") == 0
    header = (tmp_path / "ci" / "reliability_1.csv").read_text().splitlines()[0]
    assert header == "bin,mean_conf,precision,ci_lo,ci_hi,count"


def test_report_constant_confidence_single_bin(tmp_path, fx):
    gt = json.loads(fx["gt"].read_text())
    det = [
        {"image_id": a["image_id"], "category_id": 1, "bbox": a["bbox"], "score": 0.42}
        for a in gt["annotations"]
    ]
    p = tmp_path / "d.json"
    p.write_text(json.dumps(det))
    assert run("report", "--gt", fx["gt"], "--det", p, "--n-boot", 50, "--out", tmp_path / "r") == 0
    lines = (tmp_path / "r" / "reliability_1.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("4,0.42,")


def test_report_needs_input(tmp_path):
    assert run("report", "--out", tmp_path) == 2


def test_report_svg_is_deterministic(tmp_path, fx):
    pytest.importorskip("matplotlib")
    for name in ("a", "b"):
        assert run("report", "--gt", fx["gt"], "--det", fx["det"], "--n-boot", 20, "--svg", "--out", tmp_path / name) == 0
    for f in ("reliability_1.svg", "pr_1.svg"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_calibrate_single_cell_and_apply(tmp_path):
    gt, det = _simulate(tmp_path / "sim")
    out = tmp_path / "cal"
    assert run("calibrate", "--gt", gt, "--det", det, "--cell", 3, 6, "--out", out) == 0
    sr = json.loads((out / "search_result.json").read_text())
    assert sr["categories"][0]["chosen"] == [3, 6]
    cmap = load_calibration_map(out / "calibration_map.json")
    assert cmap.categories[1].n_box_bins == 3
    assert run("apply", "--map", out / "calibration_map.json", "--det", det, "--out", tmp_path / "app") == 0
    calibrated = load_detections(tmp_path / "app" / "detections.json")
    raw = load_detections(det)
    assert [d.bbox for d in calibrated] == [d.bbox for d in raw]
    assert not np.array_equal(calibrated.confidences, raw.confidences)


def test_apply_identity_echoes_input(tmp_path, fx):
    ident = tmp_path / "identity.json"
    ident.write_text(json.dumps({"t_iou": 0.5, "config": None, "categories": {}, "fallback": []}))
    assert run("apply", "--map", ident, "--det", fx["det"], "--out", tmp_path) == 0
    assert json.loads((tmp_path / "detections.json").read_text()) == json.loads(fx["det"].read_text())
    rep = json.loads((tmp_path / "apply_report.json").read_text())
    assert rep["passthrough_categories"] == [1, 2]


def test_calibrate_absolute_bias_prefers_conditional_cells(tmp_path):
    # the signed mean shift nearly cancels under mean-preserving binning;
    # the absolute variant does see the subgroup split
    picks = []
    for seed in range(5):
        gt, det = _simulate(tmp_path / f"s{seed}", seed=seed)
        out = tmp_path / f"c{seed}"
        assert run("calibrate", "--gt", gt, "--det", det, "--grid-b", 1, 2, 3, "--grid-c", 6, 10,
                   "--absolute-bias", "--seed", seed, "--out", out) == 0
        picks.append(json.loads((out / "search_result.json").read_text())["categories"][0]["chosen"][0])
    assert sum(b >= 2 for b in picks) > len(picks) / 2


def test_simulate_outputs_are_consistent(tmp_path):
    gt_path, det_path = _simulate(tmp_path / "s", n=500)
    truth = json.loads((tmp_path / "s" / "truth.json").read_text())
    lab = match(load_detections(det_path), load_ground_truth(gt_path))
    assert lab.tp.tolist() == truth["labels"]
    assert len(truth["true_p"]) == len(lab) and truth["run_config"]["seed"] == 0


def test_simulate_default_spec(tmp_path):
    assert run("simulate", "--n-images", 100, "--out", tmp_path) == 0
    assert len(json.loads((tmp_path / "detections.json").read_text())) == 10_000


def test_expected_ap(tmp_path, capsys):
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"p": [1.0, 0.5], "gt_count": 2}))
    assert run("expected-ap", "--input", p, "--trials", 20000, "--out", tmp_path) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["closed_form"] == 0.75 and doc["enumerated"] == 0.75
    mc = doc["monte_carlo"]
    assert abs(mc["mean"] - 0.75) <= 3 * mc["stderr"]
    assert json.loads((tmp_path / "expected_ap.json").read_text()) == doc
    p.write_text(json.dumps({"p": [1.0], "gt_count": 1}))
    assert run("expected-ap", "--input", p, "--trials", 10) == 0
    assert json.loads(capsys.readouterr().out)["closed_form"] == 1.0
    p.write_text(json.dumps({"p": [1.2], "gt_count": 1}))
    assert run("expected-ap", "--input", p) == 1


def test_tta_command(tmp_path, fx):
    assert run("tta", "--run", f"a={fx['det']}", "--run", f"b={fx['det']}", "--mode", "merge_then_calibrate_none",
               "--gt", fx["gt"], "--out", tmp_path) == 0
    merged = json.loads((tmp_path / "detections.json").read_text())
    assert len(merged) == 9  # the fixture's duplicate pair collapses as well
    rep = json.loads((tmp_path / "tta_report.json").read_text())
    assert rep["runs"] == [{"tag": "a", "n_detections": 10}, {"tag": "b", "n_detections": 10}]
    # per-run mode without maps is a configuration error
    assert run("tta", "--run", f"a={fx['det']}", "--out", tmp_path / "x") == 1
    assert run("tta", "--run", "nodetections", "--out", tmp_path / "x") == 2


def test_tta_with_per_run_maps(tmp_path, fx):
    ident = tmp_path / "identity.json"
    ident.write_text(json.dumps({"t_iou": 0.5, "config": None, "categories": {}}))
    assert run("tta", "--run", f"s1={fx['det']}:{ident}", "--out", tmp_path) == 0
    assert len(json.loads((tmp_path / "detections.json").read_text())) == 9


def test_config_file_sets_defaults(tmp_path, fx):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"t-iou": 0.9, "gt": str(fx["gt"]), "det": str(fx["det"])}))
    assert run("match", "--config", cfg, "--out", tmp_path / "a") == 0
    doc = json.loads((tmp_path / "a" / "labels.json").read_text())
    assert doc["run_config"]["t_iou"] == 0.9
    assert run("match", "--config", cfg, "--t-iou", 0.5, "--out", tmp_path / "b") == 0
    assert json.loads((tmp_path / "b" / "labels.json").read_text())["run_config"]["t_iou"] == 0.5
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("match", "--config", cfg, "--gt", fx["gt"], "--det", fx["det"], "--out", tmp_path) == 2
