"""Merging detections from several test-time augmentations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .calibration import CalibrationMap, calibrate
from .data import DetectionSet
from .exceptions import ConfigurationError
from .matching import nms

__all__ = ["AugmentedRun", "TTA_MODES", "merge_tta"]

TTA_MODES = ("merge_then_calibrate_none", "calibrate_merged", "calibrate_each_then_merge")


@dataclass(frozen=True)
class AugmentedRun:
    """Detections of one augmentation, already mapped back to original image coordinates."""

    tag: str
    detections: DetectionSet
    calibration_map: Optional[CalibrationMap] = None


def merge_tta(
    runs: Sequence[AugmentedRun],
    mode: str = "calibrate_each_then_merge",
    t_nms: float = 0.5,
    merged_map: Optional[CalibrationMap] = None,
) -> DetectionSet:
    """Union the runs and suppress duplicates with per-(image, category) NMS.

    ``calibrate_each_then_merge`` calibrates every run with its own map
    before the union. ``calibrate_merged`` runs NMS on raw scores and then
    calibrates the survivors with ``merged_map``. The union is put in a
    canonical order (confidence desc, tag, index) first, so the result does
    not depend on the order of ``runs``.
    """
    if not runs:
        raise ConfigurationError("need at least one run")
    if mode not in TTA_MODES:
        raise ConfigurationError(f"mode must be one of {TTA_MODES}")
    tags = [r.tag for r in runs]
    if len(set(tags)) != len(tags):
        raise ConfigurationError("run tags must be unique")
    if mode == "calibrate_each_then_merge":
        missing = [r.tag for r in runs if r.calibration_map is None]
        if missing:
            raise ConfigurationError(f"mode {mode} needs a calibration map for runs {missing}")
    if mode == "calibrate_merged" and merged_map is None:
        raise ConfigurationError(f"mode {mode} needs merged_map")

    keyed = []
    for run in runs:
        det = run.detections
        if mode == "calibrate_each_then_merge":
            det = calibrate(run.calibration_map, det)
        keyed.extend(((-d.confidence, run.tag, i), d) for i, d in enumerate(det))
    keyed.sort(key=lambda kd: kd[0])
    merged = nms(DetectionSet(tuple(d for _, d in keyed)), t_nms)
    if mode == "calibrate_merged":
        merged = calibrate(merged_map, merged)
    return merged
