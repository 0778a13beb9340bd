"""``boxcal`` command line.

Every command writes into the directory given by ``--out`` and echoes its
fully resolved configuration (``run_config``) plus ``format_version`` into
each JSON report. Exit status: 0 on success, 1 on data or I/O errors,
2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import BinningConfig, CalibrationMap, calibrate, load_calibration_map, validate_map_document
from .data import _id_key, _read_json, detections_to_records, load_detections, load_ground_truth
from .exceptions import BoxcalError
from .expected_ap import (
    MAX_ENUMERATION,
    StochasticDetections,
    expected_ap_closed,
    expected_ap_enumerate,
    expected_ap_monte_carlo,
)
from .io import FORMAT_VERSION, dumps, write_csv, write_json
from .matching import LabeledDetections, MatchLabel, match
from .metrics import COCO_THRESHOLDS, average_precision, ece, map_metric, pr_curve_from_ranked, rank_order, reliability_table
from .search import DEFAULT_BOX_BINS, DEFAULT_CONF_BINS, OBJECTIVES, SearchGrid, fit_map, search
from .synth import SubgroupSpec, generate
from .tta import TTA_MODES, AugmentedRun, merge_tta

log = logging.getLogger("boxcal")

_NOT_ECHOED = {"func", "verbose"}


# ---------------------------------------------------------------------------
# argument types


def _unit_interval(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not (0.0 < v <= 1.0):
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {v}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _run_spec(text: str) -> tuple[str, str, str | None]:
    tag, sep, rest = text.partition("=")
    if not sep or not tag or not rest:
        raise argparse.ArgumentTypeError(f"expected tag=<detections.json>[:<calib.json>], got {text!r}")
    det, _, calib = rest.partition(":")
    return tag, det, calib or None


# ---------------------------------------------------------------------------
# helpers


def _run_config(args) -> dict:
    cfg = {"command": args.command, "version": __version__}
    for key, value in sorted(vars(args).items()):
        if key in _NOT_ECHOED or key == "command":
            continue
        if isinstance(value, tuple):
            value = list(value)
        if isinstance(value, list):
            value = [list(v) if isinstance(v, tuple) else v for v in value]
        cfg[key] = value
    return cfg


def _report(args, **body) -> dict:
    return {"format_version": FORMAT_VERSION, "run_config": _run_config(args), **body}


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _binning(args) -> BinningConfig:
    base = BinningConfig.baseline() if args.binning == "baseline" else BinningConfig.modified()
    return BinningConfig(
        base.n_conf_bins, base.scheme, base.interpolation, base.anchored_bounds, base.support_x, args.min_samples
    )


def _cat_slug(cat) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in str(cat))


def _labels_doc(labeled: LabeledDetections) -> dict:
    det = labeled.detections
    rows = []
    for d, lab in zip(det, labeled.labels):
        rows.append(
            {
                "detection_index": lab.detection_index,
                "image_id": d.image_id,
                "category_id": d.category,
                "bbox": d.bbox.as_list(),
                "score": d.confidence,
                "tp": lab.tp,
                "matched_gt": lab.matched_gt,
                "ignored": lab.ignored,
            }
        )
    counts = [{"category_id": c, "gt_count": labeled.gt_count(c)} for c in labeled.categories]
    return {"t_iou": labeled.labels[0].iou_threshold if labeled.labels else None, "gt_counts": counts, "labels": rows}


def _load_labels(path) -> LabeledDetections:
    from .data import BBox, Detection, DetectionSet

    doc = _read_json(path)
    try:
        t_iou = doc.get("t_iou") or 0.5
        dets, labels = [], []
        for i, r in enumerate(doc["labels"]):
            dets.append(Detection(r["image_id"], r["category_id"], BBox(*r["bbox"]), float(r["score"])))
            labels.append(MatchLabel(i, bool(r["tp"]), r.get("matched_gt"), t_iou, bool(r.get("ignored", False))))
        counts = {e["category_id"]: int(e["gt_count"]) for e in doc["gt_counts"]}
    except (KeyError, TypeError) as exc:
        raise BoxcalError(f"{path}: not a labels file ({exc})") from exc
    return LabeledDetections(DetectionSet(tuple(dets)), tuple(labels), counts)


def _pr_rows(conf, tp, gt_count):
    order = rank_order(conf)
    curve = pr_curve_from_ranked(np.asarray(tp, dtype=bool)[order], gt_count)
    return curve, curve.points


# ---------------------------------------------------------------------------
# commands


def cmd_match(args) -> int:
    gt = load_ground_truth(args.gt)
    det = load_detections(args.det)
    labeled = match(det, gt, args.t_iou, args.max_dets)
    doc = _report(args, **_labels_doc(labeled))
    doc["t_iou"] = args.t_iou
    write_json(_out(args) / "labels.json", doc)
    return 0


def cmd_calibrate(args) -> int:
    gt = load_ground_truth(args.gt)
    det = load_detections(args.det)
    labeled = match(det, gt, args.t_iou, args.max_dets)
    config = _binning(args)
    out = _out(args)
    if args.cell:
        B, C = args.cell
        grid = SearchGrid((B,), (C,), config)
    else:
        grid = SearchGrid(tuple(args.grid_b), tuple(args.grid_c), config)
    result = search(labeled, grid, args.objective, args.k_folds, args.seed, args.absolute_bias, args.t_iou)
    map_doc = result.calibration_map.to_dict()
    map_doc["run_config"] = _run_config(args)
    validate_map_document(map_doc)
    write_json(out / "calibration_map.json", map_doc)
    write_json(out / "search_result.json", _report(args, grid=grid.to_dict(), **result.to_dict()))
    return 0


def cmd_apply(args) -> int:
    cal_map = load_calibration_map(args.map)
    det = load_detections(args.det)
    calibrated = calibrate(cal_map, det)
    out = _out(args)
    write_json(out / "detections.json", detections_to_records(calibrated))
    passthrough = sorted(set(det.categories) - set(cal_map.categories), key=_id_key)
    write_json(
        out / "apply_report.json",
        _report(args, n_detections=len(det), calibrated_categories=sorted(cal_map.categories, key=_id_key), passthrough_categories=passthrough),
    )
    return 0


def cmd_eval(args) -> int:
    gt = load_ground_truth(args.gt)
    det = load_detections(args.det)
    thresholds = tuple(args.thresholds)
    result = map_metric(det, gt, thresholds, args.mode, args.max_dets)
    out = _out(args)
    pr_files = {}
    labeled = match(det, gt, args.t_iou, args.max_dets)
    for cat in labeled.categories:
        if labeled.gt_count(cat) <= 0:
            continue
        conf, _, tp = labeled.samples(cat)
        _, rows = _pr_rows(conf, tp, labeled.gt_count(cat))
        name = f"pr_{_cat_slug(cat)}.csv"
        write_csv(out / name, ("rank", "precision", "recall"), rows)
        pr_files[str(cat)] = name
    per_class = [
        {"category_id": cat, "ap": {f"{t:g}": ap for t, ap in sorted(aps.items())}}
        for cat, aps in sorted(result.per_class.items(), key=lambda kv: _id_key(kv[0]))
    ]
    write_json(
        out / "metrics.json",
        _report(args, mode=args.mode, map=result.map, map50=result.map50, per_class=per_class, pr_curves=pr_files),
    )
    return 0


def _svg(path: Path, draw) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise BoxcalError("--svg needs matplotlib (pip install boxcal[plot])") from exc
    from .io import write_text
    import io as _io

    with matplotlib.rc_context({"svg.hashsalt": "boxcal", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(4, 4))
        draw(ax)
        buf = _io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    write_text(path, buf.getvalue())


def cmd_report(args) -> int:
    if args.labels:
        labeled = _load_labels(args.labels)
    elif args.gt and args.det:
        labeled = match(load_detections(args.det), load_ground_truth(args.gt), args.t_iou, args.max_dets)
    else:
        raise _UsageError("report needs --labels or both --gt and --det")
    out = _out(args)
    summary = []
    for cat in labeled.categories:
        conf, _, tp = labeled.samples(cat)
        if len(conf) == 0:
            continue
        slug = _cat_slug(cat)
        rows = reliability_table(conf, tp, args.n_bins, args.n_boot, args.alpha, args.seed)
        if args.n_boot > 0:
            header = ("bin", "mean_conf", "precision", "ci_lo", "ci_hi", "count")
        else:
            header = ("bin", "mean_conf", "precision", "count")
            rows = [(b, m, p, n) for b, m, p, _, _, n in rows]
        write_csv(out / f"reliability_{slug}.csv", header, rows)
        entry = {"category_id": cat, "n_detections": int(len(conf)), "ece": ece(conf, tp, args.n_bins)}
        G = labeled.gt_count(cat)
        curve = None
        if G > 0:
            curve, pr_rows = _pr_rows(conf, tp, G)
            write_csv(out / f"pr_{slug}.csv", ("rank", "precision", "recall"), pr_rows)
            entry["ap_raw"] = average_precision(curve, "raw")
            entry["ap_interp101"] = average_precision(curve, "interp101")
        summary.append(entry)
        if args.svg:
            _svg(out / f"reliability_{slug}.svg", lambda ax, rows=rows: _draw_reliability(ax, rows, args.n_boot > 0))
            if curve is not None:
                _svg(out / f"pr_{slug}.svg", lambda ax, curve=curve: _draw_pr(ax, curve))
    body = {"categories": summary}
    if args.search:
        sr = _read_json(args.search)
        body["search"] = [
            {"category_id": c["category_id"], "chosen": c["chosen"], "fallback": c["fallback"]}
            for c in sr.get("categories", [])
        ]
    write_json(out / "report.json", _report(args, **body))
    return 0


def _draw_reliability(ax, rows, with_ci):
    mean_conf = [r[1] for r in rows]
    prec = [r[2] for r in rows]
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls="--")
    if with_ci:
        lo = [r[2] - r[3] for r in rows]
        hi = [r[4] - r[2] for r in rows]
        ax.errorbar(mean_conf, prec, yerr=[lo, hi], fmt="o-", ms=3)
    else:
        ax.plot(mean_conf, prec, "o-", ms=3)
    ax.set(xlim=(0, 1), ylim=(0, 1), xlabel="confidence", ylabel="precision")


def _draw_pr(ax, curve):
    ax.plot(curve.recall, curve.precision, lw=1)
    ax.set(xlim=(0, 1), ylim=(0, 1.02), xlabel="recall", ylabel="precision")


_DEFAULT_SIM_SPECS = (
    {"area_range": [64.0, 1024.0], "gamma": 2.0, "detection_count": 5000},
    {"area_range": [1024.0, 16384.0], "gamma": 0.5, "detection_count": 5000},
)


def _spec_from_dict(d: dict) -> SubgroupSpec:
    try:
        dist = d.get("confidence_distribution", ["uniform", 0.0, 1.0])
        return SubgroupSpec(
            tuple(float(v) for v in d["area_range"]),
            float(d.get("gamma", 1.0)),
            int(d.get("detection_count", 1000)),
            (dist[0], float(dist[1]), float(dist[2])),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise BoxcalError(f"bad subgroup spec {d!r}: {exc}") from exc


def cmd_simulate(args) -> int:
    raw_specs = _read_json(args.spec) if args.spec else list(_DEFAULT_SIM_SPECS)
    if not isinstance(raw_specs, list):
        raise BoxcalError("spec file must hold a JSON array of subgroup specs")
    specs = [_spec_from_dict(d) for d in raw_specs]
    scene = generate(specs, args.n_images, args.category, args.seed, args.pad_fraction, (args.image_size,) * 2)
    out = _out(args)
    gt_doc = {
        "images": [{"id": i, "width": w, "height": h} for i, (w, h) in sorted(scene.gt.images.items())],
        "annotations": [
            {"id": g.id, "image_id": g.image_id, "category_id": g.category, "bbox": g.bbox.as_list(), "iscrowd": int(g.ignore)}
            for g in scene.gt
        ],
        "categories": [{"id": args.category, "name": str(args.category)}],
    }
    write_json(out / "gt.json", gt_doc)
    write_json(out / "detections.json", detections_to_records(scene.det))
    write_json(out / "truth.json", _report(args, **scene.truth_dict()))
    return 0


def cmd_expected_ap(args) -> int:
    doc = _read_json(args.input)
    try:
        s = StochasticDetections(tuple(float(p) for p in doc["p"]), int(doc["gt_count"]))
    except (KeyError, TypeError) as exc:
        raise BoxcalError(f"{args.input}: expected {{'p': [...], 'gt_count': n}} ({exc})") from exc
    closed = expected_ap_closed(s)
    enumerated = expected_ap_enumerate(s) if s.n <= MAX_ENUMERATION else None
    mc_mean, mc_stderr = expected_ap_monte_carlo(s, args.trials, args.seed)
    body = {
        "n": s.n,
        "gt_count": s.gt_count,
        "closed_form": closed,
        "enumerated": enumerated,
        "monte_carlo": {"mean": mc_mean, "stderr": mc_stderr, "trials": args.trials},
    }
    text = dumps(_report(args, **body))
    sys.stdout.write(text)
    if args.out:
        write_json(_out(args) / "expected_ap.json", _report(args, **body))
    return 0


def cmd_tta(args) -> int:
    runs = []
    for tag, det_path, calib_path in args.run:
        cal_map = load_calibration_map(calib_path) if calib_path else None
        runs.append(AugmentedRun(tag, load_detections(det_path), cal_map))
    merged_map = load_calibration_map(args.merged_map) if args.merged_map else None
    merged = merge_tta(runs, args.mode, args.nms, merged_map)
    out = _out(args)
    write_json(out / "detections.json", detections_to_records(merged))
    body = {"mode": args.mode, "runs": [{"tag": r.tag, "n_detections": len(r.detections)} for r in runs], "n_merged": len(merged)}
    if args.gt:
        result = map_metric(merged, load_ground_truth(args.gt), COCO_THRESHOLDS, "interp101", args.max_dets)
        body["map"] = result.map
        body["map50"] = result.map50
    write_json(out / "tta_report.json", _report(args, **body))
    return 0


# ---------------------------------------------------------------------------
# parser


class _UsageError(Exception):
    pass


def _add_common(p, *, t_iou=True, max_dets=True, seed=False, out_required=True):
    if t_iou:
        p.add_argument("--t-iou", type=_unit_interval, default=0.5, help="IoU threshold for TP matching (default 0.5)")
    if max_dets:
        p.add_argument("--max-dets", type=_positive_int, default=100, help="detections kept per image and category")
    if seed:
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--config", help="JSON file of default option values (keys use option names)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boxcal", description="Box-size-aware confidence calibration for object detectors.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="label detections TP/FP against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--det", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("calibrate", help="search (B, C) per category and fit a calibration map")
    p.add_argument("--gt", required=True)
    p.add_argument("--det", required=True)
    p.add_argument("--grid-b", type=_positive_int, nargs="+", default=list(DEFAULT_BOX_BINS))
    p.add_argument("--grid-c", type=_positive_int, nargs="+", default=list(DEFAULT_CONF_BINS))
    p.add_argument("--cell", type=_positive_int, nargs=2, metavar=("B", "C"), help="fixed cell; skips the search")
    p.add_argument("--objective", choices=OBJECTIVES, default="mse_hat")
    p.add_argument("--k-folds", type=int, default=5)
    p.add_argument("--binning", choices=("modified", "baseline"), default="modified")
    p.add_argument("--min-samples", type=_positive_int, default=2, help="minimum samples per confidence bin")
    p.add_argument("--absolute-bias", action="store_true", help="use mean absolute shift in the bias term")
    _add_common(p, seed=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("apply", help="apply a calibration map to detections")
    p.add_argument("--map", required=True)
    p.add_argument("--det", required=True)
    _add_common(p, t_iou=False, max_dets=False)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("eval", help="mAP, mAP50, per-class AP and PR curves")
    p.add_argument("--gt", required=True)
    p.add_argument("--det", required=True)
    p.add_argument("--thresholds", type=_unit_interval, nargs="+", default=list(COCO_THRESHOLDS))
    p.add_argument("--mode", choices=("interp101", "raw"), default="interp101")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="reliability diagrams with bootstrap intervals and PR curves")
    p.add_argument("--labels", help="labels.json written by 'match'")
    p.add_argument("--gt")
    p.add_argument("--det")
    p.add_argument("--search", help="search_result.json written by 'calibrate'")
    p.add_argument("--n-bins", type=_positive_int, default=10)
    p.add_argument("--n-boot", type=int, default=1000)
    p.add_argument("--alpha", type=_unit_interval, default=0.05)
    p.add_argument("--svg", action="store_true", help="also render SVG plots (needs matplotlib)")
    _add_common(p, seed=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("simulate", help="generate a synthetic scene with known calibration curves")
    p.add_argument("--spec", help="JSON array of subgroup specs")
    p.add_argument("--n-images", type=_positive_int, default=200)
    p.add_argument("--category", type=int, default=1)
    p.add_argument("--pad-fraction", type=float, default=0.1)
    p.add_argument("--image-size", type=float, default=4096.0)
    _add_common(p, t_iou=False, max_dets=False, seed=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("expected-ap", help="expected AP of independent stochastic detections")
    p.add_argument("--input", required=True, help="JSON object {p: [...], gt_count: n}")
    p.add_argument("--trials", type=_positive_int, default=100_000)
    _add_common(p, t_iou=False, max_dets=False, seed=True, out_required=False)
    p.set_defaults(func=cmd_expected_ap)

    p = sub.add_parser("tta", help="merge test-time-augmentation runs with optional per-run calibration")
    p.add_argument("--run", type=_run_spec, action="append", required=True, metavar="TAG=DET.json[:CALIB.json]")
    p.add_argument("--mode", choices=TTA_MODES, default="calibrate_each_then_merge")
    p.add_argument("--merged-map", help="calibration map for mode calibrate_merged")
    p.add_argument("--nms", type=_unit_interval, default=0.5, help="NMS IoU threshold")
    p.add_argument("--gt", help="optional ground truth to score the merged detections")
    _add_common(p, t_iou=False, seed=False)
    p.set_defaults(func=cmd_tta)
    return parser


def _apply_config_file(parser, argv):
    """Install defaults from ``--config`` before parsing; explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in rest if a in subparsers), None)
    if command is None:
        return
    try:
        cfg = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read --config {known.config}: {exc}")
    if not isinstance(cfg, dict):
        parser.error("--config must hold a JSON object")
    subparser = subparsers[command]
    dests = {a.dest for a in subparser._actions}
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - dests)
    if unknown:
        parser.error(f"unknown keys in --config: {', '.join(unknown)}")
    subparser.set_defaults(**cfg)
    for action in subparser._actions:
        if action.dest in cfg and action.required:
            action.required = False


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    _apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except _UsageError as exc:
        parser.error(str(exc))
    except (BoxcalError, OSError) as exc:
        print(f"boxcal {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
