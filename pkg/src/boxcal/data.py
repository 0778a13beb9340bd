"""Domain types, COCO-style JSON ingestion and image-level splitting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Hashable, Iterable, Iterator, Sequence

import numpy as np

from .exceptions import FormatError, ParameterError, SchemaError, SplitError, ValidationError

__all__ = [
    "BBox",
    "Detection",
    "GroundTruthObject",
    "DetectionSet",
    "GroundTruthSet",
    "SplitAssignment",
    "load_ground_truth",
    "load_detections",
    "detections_to_records",
    "save_detections",
    "split_by_images",
]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels, ``(x, y)`` is the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (math.isfinite(self.w) and math.isfinite(self.h)) or self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box width and height must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class Detection:
    image_id: Hashable
    category: Hashable
    bbox: BBox
    confidence: float

    def __post_init__(self):
        if not (0.0 < self.confidence <= 1.0):
            raise ValidationError(f"confidence must lie in (0, 1], got {self.confidence!r}")


@dataclass(frozen=True)
class GroundTruthObject:
    image_id: Hashable
    category: Hashable
    bbox: BBox
    ignore: bool = False
    id: Hashable = None


def _id_key(value):
    # ints and strings may be mixed in hand-written files
    return (isinstance(value, str), value)


def _index_by(values: Iterable[Hashable]) -> dict[Hashable, np.ndarray]:
    groups: dict[Hashable, list[int]] = {}
    for i, v in enumerate(values):
        groups.setdefault(v, []).append(i)
    return {k: np.asarray(v, dtype=np.intp) for k, v in groups.items()}


@dataclass(frozen=True)
class DetectionSet:
    """Ordered, immutable collection of detections.

    Columnar numpy views (``confidences``, ``areas``, ``boxes``) are computed
    lazily and cached; downstream numerics work on them rather than on the
    individual :class:`Detection` objects.
    """

    items: tuple[Detection, ...] = ()

    def __post_init__(self):
        if not isinstance(self.items, tuple):
            object.__setattr__(self, "items", tuple(self.items))

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Detection]:
        return iter(self.items)

    def __getitem__(self, i) -> Detection:
        return self.items[i]

    @cached_property
    def confidences(self) -> np.ndarray:
        return np.fromiter((d.confidence for d in self.items), dtype=float, count=len(self.items))

    @cached_property
    def boxes(self) -> np.ndarray:
        if not self.items:
            return np.zeros((0, 4))
        return np.array([(d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h) for d in self.items], dtype=float)

    @cached_property
    def areas(self) -> np.ndarray:
        b = self.boxes
        return b[:, 2] * b[:, 3]

    @cached_property
    def category_index(self) -> dict[Hashable, np.ndarray]:
        return _index_by(d.category for d in self.items)

    @cached_property
    def image_index(self) -> dict[Hashable, np.ndarray]:
        return _index_by(d.image_id for d in self.items)

    @cached_property
    def group_index(self) -> dict[tuple, np.ndarray]:
        """Indices per ``(image_id, category)`` pair."""
        return _index_by((d.image_id, d.category) for d in self.items)

    @property
    def categories(self) -> list[Hashable]:
        return sorted(self.category_index, key=_id_key)

    @property
    def image_ids(self) -> list[Hashable]:
        return sorted(self.image_index, key=_id_key)

    def with_confidences(self, confidences: Sequence[float]) -> "DetectionSet":
        """Copy with every confidence replaced, boxes and categories untouched."""
        if len(confidences) != len(self.items):
            raise ParameterError("confidence vector length does not match detection count")
        return DetectionSet(
            tuple(replace(d, confidence=float(c)) for d, c in zip(self.items, confidences))
        )

    def subset(self, image_ids: Iterable[Hashable]) -> "DetectionSet":
        keep = set(image_ids)
        return DetectionSet(tuple(d for d in self.items if d.image_id in keep))

    def take(self, indices: Iterable[int]) -> "DetectionSet":
        return DetectionSet(tuple(self.items[i] for i in indices))


@dataclass(frozen=True)
class GroundTruthSet:
    """Ground-truth objects plus the image and category registries of the file."""

    items: tuple[GroundTruthObject, ...] = ()
    images: dict[Hashable, tuple[float, float]] = field(default_factory=dict)
    category_names: dict[Hashable, str] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.items, tuple):
            object.__setattr__(self, "items", tuple(self.items))

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[GroundTruthObject]:
        return iter(self.items)

    @cached_property
    def category_index(self) -> dict[Hashable, np.ndarray]:
        return _index_by(g.category for g in self.items)

    @cached_property
    def image_index(self) -> dict[Hashable, np.ndarray]:
        return _index_by(g.image_id for g in self.items)

    @property
    def categories(self) -> list[Hashable]:
        cats = set(self.category_names) | set(self.category_index)
        return sorted(cats, key=_id_key)

    @property
    def image_ids(self) -> list[Hashable]:
        return sorted(set(self.images) | set(self.image_index), key=_id_key)

    def count(self, category: Hashable) -> int:
        """|G| for ``category``: objects that are not ignore regions."""
        idx = self.category_index.get(category)
        if idx is None:
            return 0
        return sum(1 for i in idx if not self.items[i].ignore)

    def subset(self, image_ids: Iterable[Hashable]) -> "GroundTruthSet":
        keep = set(image_ids)
        return GroundTruthSet(
            tuple(g for g in self.items if g.image_id in keep),
            {k: v for k, v in self.images.items() if k in keep},
            dict(self.category_names),
        )


@dataclass(frozen=True)
class SplitAssignment:
    calib_image_ids: frozenset
    holdout_image_ids: frozenset
    seed: int
    fraction: float


# ---------------------------------------------------------------------------
# JSON ingestion


def _read_json(path) -> Any:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno} (offset {exc.pos}): {exc.msg}"
        ) from exc


def _require(record: dict, key: str, where: str):
    if not isinstance(record, dict):
        raise SchemaError(f"{where}: expected an object, got {type(record).__name__}")
    if key not in record:
        raise SchemaError(f"{where}: missing required field '{key}'")
    return record[key]


def _parse_bbox(raw, where: str) -> BBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise SchemaError(f"{where}: field 'bbox' must be a list [x, y, w, h]")
    try:
        x, y, w, h = (float(v) for v in raw)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: field 'bbox' must contain numbers") from exc
    try:
        return BBox(x, y, w, h)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def load_ground_truth(path) -> GroundTruthSet:
    """Read a COCO-style annotation file (images / annotations / categories)."""
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: ground-truth file must be a JSON object")
    raw_images = doc.get("images", [])
    raw_anns = _require(doc, "annotations", str(path))
    raw_cats = doc.get("categories", [])

    images = {}
    for i, img in enumerate(raw_images):
        where = f"images[{i}]"
        images[_require(img, "id", where)] = (float(img.get("width", 0)), float(img.get("height", 0)))

    names = {}
    for i, cat in enumerate(raw_cats):
        where = f"categories[{i}]"
        names[_require(cat, "id", where)] = str(cat.get("name", ""))

    items = []
    for i, ann in enumerate(raw_anns):
        ann_id = ann.get("id", i) if isinstance(ann, dict) else i
        where = f"annotation id {ann_id}"
        image_id = _require(ann, "image_id", where)
        category = _require(ann, "category_id", where)
        bbox = _parse_bbox(_require(ann, "bbox", where), where)
        items.append(
            GroundTruthObject(image_id, category, bbox, bool(ann.get("iscrowd", 0)), ann_id)
        )
    return GroundTruthSet(tuple(items), images, names)


def load_detections(path) -> DetectionSet:
    """Read a COCO results file: a JSON array of ``{image_id, category_id, bbox, score}``."""
    doc = _read_json(path)
    if not isinstance(doc, list):
        raise SchemaError(f"{path}: detections file must be a JSON array")
    items = []
    for i, rec in enumerate(doc):
        where = f"detection record {i}"
        image_id = _require(rec, "image_id", where)
        category = _require(rec, "category_id", where)
        bbox = _parse_bbox(_require(rec, "bbox", where), where)
        score = _require(rec, "score", where)
        if not isinstance(score, (int, float)) or isinstance(score, bool):
            raise SchemaError(f"{where}: field 'score' must be a number")
        if not (0.0 < score <= 1.0):
            raise ValidationError(f"{where}: score {score!r} outside (0, 1]")
        items.append(Detection(image_id, category, bbox, float(score)))
    return DetectionSet(tuple(items))


def detections_to_records(det: DetectionSet) -> list[dict]:
    return [
        {
            "image_id": d.image_id,
            "category_id": d.category,
            "bbox": d.bbox.as_list(),
            "score": d.confidence,
        }
        for d in det
    ]


def save_detections(det: DetectionSet, path) -> None:
    from .io import write_json

    write_json(path, detections_to_records(det))


# ---------------------------------------------------------------------------
# splitting


def split_by_images(
    gt: GroundTruthSet, det: DetectionSet, fraction: float = 0.6, seed: int = 0
) -> tuple[tuple[GroundTruthSet, DetectionSet], tuple[GroundTruthSet, DetectionSet], SplitAssignment]:
    """Shuffle image ids with a seeded RNG and cut them into calibration / hold-out.

    The first ``ceil(fraction * n)`` shuffled images form the calibration
    split. Every detection and ground-truth object follows its image.

    Returns ``((gt_calib, det_calib), (gt_holdout, det_holdout), assignment)``.
    """
    if not (0.0 < fraction < 1.0):
        raise ParameterError(f"fraction must lie in (0, 1), got {fraction}")
    ids = sorted(set(gt.image_ids) | set(det.image_ids), key=_id_key)
    n = len(ids)
    if n < 2:
        raise SplitError(f"need at least 2 images to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    # both sides must be non-empty
    n_calib = min(max(math.ceil(fraction * n), 1), n - 1)
    calib = frozenset(ids[i] for i in order[:n_calib])
    holdout = frozenset(ids[i] for i in order[n_calib:])
    assignment = SplitAssignment(calib, holdout, seed, fraction)
    return (
        (gt.subset(calib), det.subset(calib)),
        (gt.subset(holdout), det.subset(holdout)),
        assignment,
    )
