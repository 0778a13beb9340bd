"""Box-size-aware confidence calibration and AP evaluation for object detectors."""

__version__ = "0.1.0"

from .calibration import (
    BinningConfig,
    CalibrationCurve,
    CalibrationMap,
    ConditionalCalibration,
    apply_curve,
    calibrate,
    fit_conditional,
    fit_curve,
    load_calibration_map,
)
from .data import (
    BBox,
    Detection,
    DetectionSet,
    GroundTruthObject,
    GroundTruthSet,
    SplitAssignment,
    load_detections,
    load_ground_truth,
    save_detections,
    split_by_images,
)
from .expected_ap import (
    StochasticDetections,
    expected_ap_closed,
    expected_ap_enumerate,
    expected_ap_monte_carlo,
    optimal_order,
)
from .matching import LabeledDetections, MatchLabel, iou, match, nms
from .metrics import ap_est, average_precision, brier_loss, ece, log_loss, map_metric, pr_curve, reliability_table
from .search import SearchGrid, SearchResult, estimate_bias, estimate_mse, estimate_variance, oracle_select, score_cell, search
from .tta import AugmentedRun, merge_tta
