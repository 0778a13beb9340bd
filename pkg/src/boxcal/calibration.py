"""Modified histogram binning and box-size conditional calibration.

The plain histogram-binning calibrator maps every confidence in a bin to
the bin's empirical precision. Four independent switches in
:class:`BinningConfig` turn it into the modified variant:

* ``interpolation="linear"``: piecewise-linear map through one support per
  bin instead of a step lookup, so ordering inside a bin survives.
* ``anchored_bounds=True``: extra supports at (0, 0) and (1, 1).
* ``scheme="quantile"``: equally populated bins instead of equal-width ones.
* ``support_x="mean_confidence"``: place a bin's support at the mean
  confidence of its members rather than at the bin centre.

Conditional calibration splits a category's detections into ``B`` equally
populated box-area subgroups and fits one curve per subgroup.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from typing import Hashable, Optional

import numpy as np

from .data import DetectionSet, _id_key
from .exceptions import (
    ConfigurationError,
    EmptyBinError,
    InvalidCellError,
    NotEnoughSamplesError,
    SchemaError,
)
from .io import FORMAT_VERSION, write_json
from .matching import LabeledDetections
from .metrics import bin_indices

log = logging.getLogger(__name__)

__all__ = [
    "MIN_CONFIDENCE",
    "BinningConfig",
    "CalibrationCurve",
    "ConditionalCalibration",
    "CalibrationMap",
    "fit_curve",
    "apply_curve",
    "fit_conditional",
    "fit_conditional_samples",
    "calibrate",
    "load_calibration_map",
]

# calibrated scores are floored here so that they remain valid detection scores
MIN_CONFIDENCE = 1e-12

_SCHEMES = ("equal_width", "quantile")
_INTERPOLATIONS = ("step", "linear")
_SUPPORTS = ("bin_center", "mean_confidence")


@dataclass(frozen=True)
class BinningConfig:
    n_conf_bins: int = 10
    scheme: str = "quantile"
    interpolation: str = "linear"
    anchored_bounds: bool = True
    support_x: str = "mean_confidence"
    min_samples_per_bin: int = 2

    def __post_init__(self):
        if int(self.n_conf_bins) < 1:
            raise ConfigurationError("n_conf_bins must be >= 1")
        if self.scheme not in _SCHEMES:
            raise ConfigurationError(f"scheme must be one of {_SCHEMES}")
        if self.interpolation not in _INTERPOLATIONS:
            raise ConfigurationError(f"interpolation must be one of {_INTERPOLATIONS}")
        if self.support_x not in _SUPPORTS:
            raise ConfigurationError(f"support_x must be one of {_SUPPORTS}")
        if int(self.min_samples_per_bin) < 1:
            raise ConfigurationError("min_samples_per_bin must be >= 1")

    @classmethod
    def baseline(cls, n_conf_bins: int = 7) -> "BinningConfig":
        """Plain histogram binning: equal-width bins, step lookup."""
        return cls(n_conf_bins, "equal_width", "step", False, "bin_center")

    @classmethod
    def modified(cls, n_conf_bins: int = 10) -> "BinningConfig":
        return cls(n_conf_bins, "quantile", "linear", True, "mean_confidence")

    def with_bins(self, n_conf_bins: int) -> "BinningConfig":
        return replace(self, n_conf_bins=int(n_conf_bins))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BinningConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class CalibrationCurve:
    """Fitted confidence -> TP probability map.

    ``x``/``y`` are the spline supports (anchors included when enabled).
    ``bin_edges`` (length ``n_bins + 1``) and ``bin_values`` describe the
    underlying bins and drive the step lookup.
    """

    x: np.ndarray
    y: np.ndarray
    interpolation: str
    bin_edges: np.ndarray
    bin_values: np.ndarray
    config: Optional[BinningConfig] = None

    @property
    def supports(self) -> list[tuple[float, float]]:
        return [(float(a), float(b)) for a, b in zip(self.x, self.y)]

    @property
    def effective_bins(self) -> int:
        """Bins actually used; below ``n_conf_bins`` when tied confidences forced a merge."""
        return len(self.bin_values)

    def __call__(self, confidences):
        return apply_curve(self, confidences)

    def to_dict(self) -> dict:
        return {
            "supports": [[float(a), float(b)] for a, b in zip(self.x, self.y)],
            "mode": self.interpolation,
            "bin_edges": [float(e) for e in self.bin_edges],
            "bin_values": [float(v) for v in self.bin_values],
        }

    @classmethod
    def from_dict(cls, d: dict, config: Optional[BinningConfig] = None) -> "CalibrationCurve":
        sup = np.asarray(d["supports"], dtype=float).reshape(-1, 2)
        return cls(
            sup[:, 0],
            sup[:, 1],
            d["mode"],
            np.asarray(d.get("bin_edges", [0.0, 1.0]), dtype=float),
            np.asarray(d.get("bin_values", [0.0]), dtype=float),
            config,
        )


def _quantile_groups(sorted_conf: np.ndarray, n_bins: int) -> np.ndarray:
    """Split positions for ``n_bins`` equally populated groups of sorted values.

    A split that would separate equal confidences is dropped, merging the
    two neighbouring groups.
    """
    n = len(sorted_conf)
    sizes = np.full(n_bins, n // n_bins)
    sizes[: n % n_bins] += 1
    splits = np.cumsum(sizes)[:-1]
    keep = sorted_conf[splits - 1] < sorted_conf[splits]
    return np.unique(splits[keep])


def fit_curve(confidences, labels, config: Optional[BinningConfig] = None) -> CalibrationCurve:
    """Fit a histogram-binning calibration curve to (confidence, TP label) samples."""
    config = config or BinningConfig()
    c = np.asarray(confidences, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if c.shape != y.shape:
        raise ValueError("confidences and labels differ in length")
    n, n_bins, min_n = len(c), config.n_conf_bins, config.min_samples_per_bin
    if n == 0 or n < n_bins * min_n:
        raise NotEnoughSamplesError(
            f"insufficient samples: {n} < {n_bins} bins x {min_n} per bin"
        )

    if config.scheme == "equal_width":
        group = bin_indices(c, n_bins)
        counts = np.bincount(group, minlength=n_bins)
        for j, k in enumerate(counts):
            if k == 0:
                raise EmptyBinError(j, j / n_bins, (j + 1) / n_bins)
            if k < min_n:
                raise NotEnoughSamplesError(f"bin {j} holds {k} < {min_n} samples")
        edges = np.arange(n_bins + 1) / n_bins
    else:
        order = np.argsort(c, kind="stable")
        cs = c[order]
        splits = _quantile_groups(cs, n_bins)
        group = np.empty(n, dtype=np.intp)
        group[order] = np.searchsorted(splits, np.arange(n), side="right")
        counts = np.bincount(group)
        if counts.min() < min_n:
            raise NotEnoughSamplesError(f"a quantile bin holds {counts.min()} < {min_n} samples")
        edges = np.concatenate(([0.0], cs[splits - 1], [1.0]))

    n_eff = len(counts)
    hits = np.bincount(group, weights=y, minlength=n_eff)
    values = hits / counts
    if config.support_x == "bin_center":
        xs = (edges[:-1] + edges[1:]) / 2.0
    else:
        xs = np.bincount(group, weights=c, minlength=n_eff) / counts

    # coincident supports are merged by averaging their precision
    ux, inverse = np.unique(xs, return_inverse=True)
    uy = np.bincount(inverse, weights=values) / np.bincount(inverse)
    if config.anchored_bounds:
        if ux[0] > 0.0:
            ux, uy = np.concatenate(([0.0], ux)), np.concatenate(([0.0], uy))
        if ux[-1] < 1.0:
            ux, uy = np.concatenate((ux, [1.0])), np.concatenate((uy, [1.0]))
    return CalibrationCurve(ux, uy, config.interpolation, edges, values, config)


def apply_curve(curve: CalibrationCurve, confidences):
    """Evaluate ``curve``; returns a float for scalar input, an array otherwise."""
    c = np.asarray(confidences, dtype=float)
    if curve.interpolation == "step":
        j = np.searchsorted(curve.bin_edges[1:-1], c, side="left")
        out = curve.bin_values[j]
    else:
        # np.interp clamps to the outermost supports
        out = np.interp(c, curve.x, curve.y)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class ConditionalCalibration:
    category: Hashable
    box_edges: np.ndarray
    curves: tuple[CalibrationCurve, ...]

    @property
    def n_box_bins(self) -> int:
        return len(self.curves)

    def subgroup(self, areas) -> np.ndarray:
        """Subgroup index per area; areas outside the fitted range clamp to the end groups."""
        return np.searchsorted(self.box_edges, np.asarray(areas, dtype=float), side="left")

    def apply(self, confidences, areas) -> np.ndarray:
        c = np.asarray(confidences, dtype=float)
        g = self.subgroup(areas)
        out = np.empty_like(c)
        for k, curve in enumerate(self.curves):
            mask = g == k
            if mask.any():
                out[mask] = apply_curve(curve, c[mask])
        return out

    def to_dict(self) -> dict:
        return {
            "category_id": self.category,
            "B": self.n_box_bins,
            "box_edges": [float(e) for e in self.box_edges],
            "curves": [c.to_dict() for c in self.curves],
        }

    @classmethod
    def from_dict(cls, d: dict, config=None) -> "ConditionalCalibration":
        curves = tuple(CalibrationCurve.from_dict(c, config) for c in d["curves"])
        if len(curves) != d["B"]:
            raise SchemaError("number of curves does not match B")
        return cls(d["category_id"], np.asarray(d["box_edges"], dtype=float), curves)


def fit_conditional_samples(
    confidences, areas, labels, n_box_bins: int, config: Optional[BinningConfig] = None, category=None
) -> ConditionalCalibration:
    """Fit one curve per box-area subgroup; subgroups split at area quantiles k/B."""
    config = config or BinningConfig()
    c = np.asarray(confidences, dtype=float).ravel()
    a = np.asarray(areas, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if n_box_bins < 1:
        raise InvalidCellError("n_box_bins must be >= 1")
    if len(c) == 0:
        raise InvalidCellError(f"category {category!r}: no samples")
    if n_box_bins == 1:
        edges = np.zeros(0)
    else:
        edges = np.quantile(a, np.arange(1, n_box_bins) / n_box_bins)
    group = np.searchsorted(edges, a, side="left")
    curves = []
    for k in range(n_box_bins):
        mask = group == k
        try:
            curves.append(fit_curve(c[mask], y[mask], config))
        except NotEnoughSamplesError as exc:
            raise InvalidCellError(
                f"category {category!r}, B={n_box_bins}, C={config.n_conf_bins}: subgroup {k}: {exc}"
            ) from exc
    return ConditionalCalibration(category, edges, tuple(curves))


def fit_conditional(
    labeled: LabeledDetections, category, n_box_bins: int, config: Optional[BinningConfig] = None
) -> ConditionalCalibration:
    conf, area, tp = labeled.samples(category)
    return fit_conditional_samples(conf, area, tp, n_box_bins, config, category)


@dataclass(frozen=True, eq=False)
class CalibrationMap:
    """Per-category conditional calibrations fitted at one IoU threshold.

    ``fallback`` lists categories that were seen during fitting but kept
    the identity map (no feasible fit).
    """

    t_iou: float = 0.5
    config: Optional[BinningConfig] = None
    categories: dict = field(default_factory=dict)
    fallback: tuple = ()

    @classmethod
    def identity(cls, t_iou: float = 0.5, fallback=()) -> "CalibrationMap":
        return cls(t_iou, None, {}, tuple(fallback))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "t_iou": self.t_iou,
            "config": self.config.to_dict() if self.config else None,
            "categories": {
                str(cat): self.categories[cat].to_dict()
                for cat in sorted(self.categories, key=_id_key)
            },
            "fallback": sorted(self.fallback, key=_id_key),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationMap":
        validate_map_document(d)
        config = BinningConfig.from_dict(d["config"]) if d.get("config") else None
        cats = {}
        for entry in d["categories"].values():
            cc = ConditionalCalibration.from_dict(entry, config)
            cats[cc.category] = cc
        return cls(float(d["t_iou"]), config, cats, tuple(d.get("fallback", ())))

    def save(self, path) -> None:
        doc = self.to_dict()
        validate_map_document(doc)
        write_json(path, doc)


def _schema() -> dict:
    text = resources.files("boxcal").joinpath("schemas/calibration_map.schema.json").read_text()
    return json.loads(text)


def validate_map_document(doc: dict) -> None:
    import jsonschema

    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise SchemaError(f"calibration map invalid at '{path}': {exc.message}") from exc


def load_calibration_map(path) -> CalibrationMap:
    from .data import _read_json

    return CalibrationMap.from_dict(_read_json(path))


def calibrate(cal_map: CalibrationMap, det: DetectionSet) -> DetectionSet:
    """Replace each detection's confidence by its category/subgroup curve value.

    Categories missing from the map pass through unchanged.
    """
    new = det.confidences.copy()
    for cat, idx in det.category_index.items():
        cc = cal_map.categories.get(cat)
        if cc is None:
            log.info("category %r not in calibration map; confidences passed through", cat)
            continue
        new[idx] = cc.apply(det.confidences[idx], det.areas[idx])
    np.maximum(new, MIN_CONFIDENCE, out=new)
    return det.with_confidences(new)
