"""Synthetic stochastic detectors with known per-subgroup calibration curves.

Each subgroup draws confidences from a chosen distribution, box areas
uniformly from an area range, and TP labels from ``Bernoulli(c ** gamma)``.
A TP detection gets a ground-truth box that coincides with it exactly and
every box in an image is placed without overlap, so geometric matching at
any IoU threshold reproduces the drawn labels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np

from .data import BBox, Detection, DetectionSet, GroundTruthObject, GroundTruthSet
from .exceptions import ConsistencyError, GenerationError, ParameterError
from .matching import LabeledDetections, match

__all__ = [
    "SubgroupSpec",
    "SyntheticScene",
    "TTAScene",
    "generate",
    "generate_tta",
    "relabel_with_matching",
]

_MIN_CONF = 1e-9


@dataclass(frozen=True)
class SubgroupSpec:
    """One box-size subgroup with true calibration curve ``c ** gamma``.

    ``confidence_distribution`` is ``("uniform", a, b)`` or ``("beta", alpha, beta)``.
    """

    area_range: tuple[float, float]
    gamma: float = 1.0
    detection_count: int = 1000
    confidence_distribution: tuple = ("uniform", 0.0, 1.0)

    def __post_init__(self):
        lo, hi = self.area_range
        if not (0 < lo < hi):
            raise ParameterError(f"area_range must satisfy 0 < min < max, got {self.area_range}")
        if self.gamma <= 0:
            raise ParameterError("gamma must be > 0")
        if self.detection_count < 0:
            raise ParameterError("detection_count must be >= 0")
        kind, a, b = self.confidence_distribution
        if kind == "uniform":
            if not (0.0 <= a < b <= 1.0):
                raise ParameterError("uniform(a, b) needs 0 <= a < b <= 1")
        elif kind == "beta":
            if a <= 0 or b <= 0:
                raise ParameterError("beta(alpha, beta) needs positive parameters")
        else:
            raise ParameterError(f"unknown confidence distribution {kind!r}")

    def true_curve(self, confidences):
        return np.asarray(confidences, dtype=float) ** self.gamma

    def sample_confidences(self, rng: np.random.Generator, n: int) -> np.ndarray:
        kind, a, b = self.confidence_distribution
        c = rng.uniform(a, b, n) if kind == "uniform" else rng.beta(a, b, n)
        return np.clip(c, _MIN_CONF, 1.0)

    def sample_areas(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.area_range[0], self.area_range[1], n)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["area_range"] = list(self.area_range)
        d["confidence_distribution"] = list(self.confidence_distribution)
        d["true_curve"] = {"family": "power", "gamma": self.gamma}
        return d


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    gt: GroundTruthSet
    det: DetectionSet
    true_p: np.ndarray
    labels: np.ndarray
    subgroup: np.ndarray
    specs: tuple = ()

    def truth_dict(self) -> dict:
        return {
            "true_p": [float(p) for p in self.true_p],
            "labels": [bool(v) for v in self.labels],
            "subgroup": [int(g) for g in self.subgroup],
            "specs": [s.to_dict() for s in self.specs],
        }


class _ShelfPacker:
    """Row-by-row placement of square boxes inside fixed-size images."""

    def __init__(self, width: float, height: float, gap: float):
        self.width, self.height, self.gap = width, height, gap
        self.cursor: dict = {}

    def place(self, image_id, side: float) -> tuple[float, float]:
        x, y, row_h = self.cursor.get(image_id, (0.0, 0.0, 0.0))
        if side > self.width:
            raise GenerationError(f"box side {side:.1f} exceeds image width {self.width}")
        if x + side > self.width:
            x, y, row_h = 0.0, y + row_h + self.gap, 0.0
        if y + side > self.height:
            raise GenerationError(
                f"image {image_id} is full; increase n_images or image_size to lower the box density"
            )
        self.cursor[image_id] = (x + side + self.gap, y, max(row_h, side))
        return x, y


def _image_registry(n_images: int, image_size) -> dict:
    return {i: (float(image_size[0]), float(image_size[1])) for i in range(1, n_images + 1)}


def generate(
    specs: Sequence[SubgroupSpec],
    n_images: int,
    category: Hashable = 1,
    seed=0,
    pad_fraction: float = 0.1,
    image_size: tuple[float, float] = (4096.0, 4096.0),
    gap: float = 1.0,
) -> SyntheticScene:
    """Draw a scene of detections and ground truth for ``specs``.

    Detections are shuffled and assigned to images round-robin. Beyond the
    GT objects behind TPs, ``round(pad_fraction * #TP)`` unmatched objects
    are added so that recall stays below one.
    """
    if n_images < 1:
        raise ParameterError("n_images must be >= 1")
    if not specs:
        raise ParameterError("need at least one subgroup spec")
    rng = np.random.default_rng(seed)
    conf, area, group = [], [], []
    for k, spec in enumerate(specs):
        conf.append(spec.sample_confidences(rng, spec.detection_count))
        area.append(spec.sample_areas(rng, spec.detection_count))
        group.append(np.full(spec.detection_count, k))
    conf, area, group = np.concatenate(conf), np.concatenate(area), np.concatenate(group)
    true_p = np.empty_like(conf)
    for k, spec in enumerate(specs):
        true_p[group == k] = spec.true_curve(conf[group == k])
    labels = rng.random(len(conf)) < true_p

    perm = rng.permutation(len(conf))
    conf, area, group, true_p, labels = conf[perm], area[perm], group[perm], true_p[perm], labels[perm]

    n_pad = int(round(pad_fraction * labels.sum()))
    pad_group = rng.integers(0, len(specs), n_pad)
    pad_area = np.array([specs[g].sample_areas(rng, 1)[0] for g in pad_group])

    packer = _ShelfPacker(image_size[0], image_size[1], gap)
    dets, gts = [], []
    next_id = 1
    for i in range(len(conf)):
        image_id = i % n_images + 1
        side = math.sqrt(area[i])
        x, y = packer.place(image_id, side)
        box = BBox(x, y, side, side)
        dets.append(Detection(image_id, category, box, float(conf[i])))
        if labels[i]:
            gts.append(GroundTruthObject(image_id, category, box, False, next_id))
            next_id += 1
    for j in range(n_pad):
        image_id = (len(conf) + j) % n_images + 1
        side = math.sqrt(pad_area[j])
        x, y = packer.place(image_id, side)
        gts.append(GroundTruthObject(image_id, category, BBox(x, y, side, side), False, next_id))
        next_id += 1

    gt = GroundTruthSet(tuple(gts), _image_registry(n_images, image_size), {category: str(category)})
    return SyntheticScene(gt, DetectionSet(tuple(dets)), true_p, labels, group, tuple(specs))


def relabel_with_matching(scene: SyntheticScene, t_iou: float = 0.5, max_dets: Optional[int] = None) -> LabeledDetections:
    """Match the scene geometrically and check the result against the drawn labels."""
    labeled = match(scene.det, scene.gt, t_iou, max_dets)
    if labeled.ignored.any() or not np.array_equal(labeled.tp, scene.labels):
        bad = int(np.sum(labeled.tp != scene.labels) + labeled.ignored.sum())
        raise ConsistencyError(f"geometric matching disagrees with generator labels on {bad} detections")
    return labeled


@dataclass(frozen=True, eq=False)
class TTAScene:
    gt: GroundTruthSet
    runs: dict
    true_p: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)


def generate_tta(
    runs: dict,
    n_images: int,
    category: Hashable = 1,
    seed=0,
    pad_fraction: float = 0.1,
    image_size: tuple[float, float] = (4096.0, 4096.0),
    gap: float = 1.0,
) -> TTAScene:
    """Scene seen through several augmentations with run-specific miscalibration.

    ``runs`` maps a tag to a list of :class:`SubgroupSpec`; every run must
    list the same area ranges in the same order. TPs of all runs are drawn
    from one shared pool of objects per subgroup, so different runs detect
    overlapping sets of objects with identical boxes, which NMS then merges.
    FPs get boxes of their own.
    """
    tags = list(runs)
    if not tags:
        raise ParameterError("need at least one run")
    ranges = [tuple(s.area_range for s in runs[t]) for t in tags]
    if any(r != ranges[0] for r in ranges):
        raise ParameterError("all runs must share the same subgroup area ranges")
    rng = np.random.default_rng(seed)

    drawn = {}
    for tag in tags:
        per_spec = []
        for spec in runs[tag]:
            c = spec.sample_confidences(rng, spec.detection_count)
            p = spec.true_curve(c)
            per_spec.append((c, p, rng.random(len(c)) < p))
        drawn[tag] = per_spec

    packer = _ShelfPacker(image_size[0], image_size[1], gap)
    slot = 0
    gts, next_id = [], 1
    pools = []
    for k, area_range in enumerate(ranges[0]):
        n_tp = max(int(drawn[t][k][2].sum()) for t in tags)
        n_obj = n_tp + int(round(pad_fraction * n_tp))
        objs = []
        for a in rng.uniform(area_range[0], area_range[1], n_obj):
            image_id = slot % n_images + 1
            slot += 1
            side = math.sqrt(a)
            x, y = packer.place(image_id, side)
            box = BBox(x, y, side, side)
            gts.append(GroundTruthObject(image_id, category, box, False, next_id))
            next_id += 1
            objs.append((image_id, box))
        pools.append(objs)

    out_runs, out_p, out_labels = {}, {}, {}
    for tag in tags:
        items, ps, labs = [], [], []
        for k, (c, p, lab) in enumerate(drawn[tag]):
            pool = pools[k]
            chosen = iter(rng.choice(len(pool), size=int(lab.sum()), replace=False))
            lo, hi = ranges[0][k]
            for ci, is_tp in zip(c, lab):
                if is_tp:
                    image_id, box = pool[next(chosen)]
                else:
                    image_id = slot % n_images + 1
                    slot += 1
                    side = math.sqrt(rng.uniform(lo, hi))
                    x, y = packer.place(image_id, side)
                    box = BBox(x, y, side, side)
                items.append(Detection(image_id, category, box, float(ci)))
            ps.append(p)
            labs.append(lab)
        perm = rng.permutation(len(items))
        out_runs[tag] = DetectionSet(tuple(items[i] for i in perm))
        out_p[tag] = np.concatenate(ps)[perm]
        out_labels[tag] = np.concatenate(labs)[perm]

    gt = GroundTruthSet(tuple(gts), _image_registry(n_images, image_size), {category: str(category)})
    return TTAScene(gt, out_runs, out_p, out_labels)
