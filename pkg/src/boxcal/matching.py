"""IoU, greedy TP/FP assignment and non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Hashable, Optional

import numpy as np

from .data import BBox, DetectionSet, GroundTruthSet, _id_key
from .exceptions import ParameterError

__all__ = ["MatchLabel", "LabeledDetections", "iou", "iou_matrix", "match", "nms"]


@dataclass(frozen=True)
class MatchLabel:
    """Outcome for one detection at one IoU threshold.

    ``ignored`` detections (matched to a crowd region, or beyond the
    per-image ``max_dets`` cap) are neither TP nor FP.
    """

    detection_index: int
    tp: bool
    matched_gt: Optional[Hashable]
    iou_threshold: float
    ignored: bool = False


@dataclass(frozen=True)
class LabeledDetections:
    detections: DetectionSet
    labels: tuple[MatchLabel, ...]
    gt_count_per_category: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.labels, tuple):
            object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) != len(self.detections):
            raise ParameterError("labels must align with detections")

    def __len__(self) -> int:
        return len(self.labels)

    @cached_property
    def tp(self) -> np.ndarray:
        return np.fromiter((lab.tp for lab in self.labels), dtype=bool, count=len(self.labels))

    @cached_property
    def ignored(self) -> np.ndarray:
        return np.fromiter((lab.ignored for lab in self.labels), dtype=bool, count=len(self.labels))

    @property
    def categories(self) -> list:
        cats = set(self.gt_count_per_category) | set(self.detections.category_index)
        return sorted(cats, key=_id_key)

    def gt_count(self, category) -> int:
        return int(self.gt_count_per_category.get(category, 0))

    def category_indices(self, category) -> np.ndarray:
        """Indices of the category's evaluable (non-ignored) detections, in input order."""
        idx = self.detections.category_index.get(category)
        if idx is None:
            return np.zeros(0, dtype=np.intp)
        return idx[~self.ignored[idx]]

    def samples(self, category) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(confidences, areas, tp_labels)`` of the category's evaluable detections."""
        idx = self.category_indices(category)
        return (
            self.detections.confidences[idx],
            self.detections.areas[idx],
            self.tp[idx].astype(float),
        )

    def with_detections(self, detections: DetectionSet) -> "LabeledDetections":
        """Keep the labels, swap the detections (e.g. after recalibration)."""
        return LabeledDetections(detections, self.labels, dict(self.gt_count_per_category))


def iou(a: BBox, b: BBox) -> float:
    return float(iou_matrix(np.array([a.as_list()]), np.array([b.as_list()]))[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``xywh`` box arrays of shapes ``(n, 4)`` and ``(m, 4)``."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0, None)
    inter = iw * ih
    # areas from the same corner differences, so identical boxes give exactly 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def _rank(det: DetectionSet, idx) -> np.ndarray:
    # confidence descending, input index ascending
    idx = np.asarray(idx, dtype=np.intp)
    order = np.lexsort((idx, -det.confidences[idx]))
    return idx[order]


def match(
    det: DetectionSet, gt: GroundTruthSet, t_iou: float = 0.5, max_dets: Optional[int] = 100
) -> LabeledDetections:
    """Label every detection TP / FP / ignored at IoU threshold ``t_iou``.

    Per (image, category), detections are visited in descending confidence
    and each claims the still-free non-crowd ground truth with the highest
    IoU >= ``t_iou`` (ties go to the lowest annotation id). A detection that
    only overlaps a crowd region is ignored. Detections ranked beyond
    ``max_dets`` within their image and category are ignored as well.
    """
    if not (0.0 < t_iou <= 1.0):
        raise ParameterError(f"t_iou must lie in (0, 1], got {t_iou}")
    if max_dets is not None and max_dets < 1:
        raise ParameterError(f"max_dets must be >= 1, got {max_dets}")

    gt_groups: dict = {}
    for j, g in enumerate(gt):
        gt_groups.setdefault((g.image_id, g.category), []).append(j)

    labels: list[Optional[MatchLabel]] = [None] * len(det)
    for key in sorted(det.group_index, key=lambda k: (_id_key(k[0]), _id_key(k[1]))):
        ranked = _rank(det, det.group_index[key])
        if max_dets is not None:
            for i in ranked[max_dets:]:
                labels[i] = MatchLabel(int(i), False, None, t_iou, ignored=True)
            ranked = ranked[:max_dets]

        g_idx = sorted(gt_groups.get(key, []), key=lambda j: (_id_key(gt.items[j].id), j))
        if not g_idx:
            for i in ranked:
                labels[i] = MatchLabel(int(i), False, None, t_iou)
            continue

        g_boxes = np.array([gt.items[j].bbox.as_list() for j in g_idx])
        crowd = np.array([gt.items[j].ignore for j in g_idx])
        overlaps = iou_matrix(det.boxes[ranked], g_boxes)
        taken = np.zeros(len(g_idx), dtype=bool)
        for row, i in enumerate(ranked):
            ov = overlaps[row]
            free = (ov >= t_iou) & ~crowd & ~taken
            if free.any():
                # argmax returns the first maximum, i.e. the lowest id
                best = int(np.argmax(np.where(free, ov, -1.0)))
                taken[best] = True
                labels[i] = MatchLabel(int(i), True, gt.items[g_idx[best]].id, t_iou)
            elif ((ov >= t_iou) & crowd).any():
                labels[i] = MatchLabel(int(i), False, None, t_iou, ignored=True)
            else:
                labels[i] = MatchLabel(int(i), False, None, t_iou)

    counts = {c: gt.count(c) for c in gt.categories}
    for c in det.category_index:
        counts.setdefault(c, 0)
    return LabeledDetections(det, tuple(labels), counts)


def nms(det: DetectionSet, t_nms: float = 0.5) -> DetectionSet:
    """Greedy per-(image, category) suppression of boxes overlapping a kept box by IoU > ``t_nms``.

    Kept detections retain their confidences and their relative input order.
    """
    if not (0.0 < t_nms <= 1.0):
        raise ParameterError(f"t_nms must lie in (0, 1], got {t_nms}")
    keep = np.zeros(len(det), dtype=bool)
    for idx in det.group_index.values():
        ranked = _rank(det, idx)
        boxes = det.boxes[ranked]
        overlaps = iou_matrix(boxes, boxes)
        alive = np.ones(len(ranked), dtype=bool)
        for r in range(len(ranked)):
            if not alive[r]:
                continue
            keep[ranked[r]] = True
            alive[r + 1:] &= ~(overlaps[r, r + 1:] > t_nms)
    return det.take(np.flatnonzero(keep))
