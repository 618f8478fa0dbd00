"""Seed-area extraction, discretization to label maps, and evaluation metrics.

All functions are pure numpy over immutable inputs; class id 0 is background
throughout, foreground classes are 1..num_classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SeedArea:
    """Per-class activation map, clamped at 0 and normalized to max 1."""

    class_id: int
    map: np.ndarray  # (W, H)


@dataclass(frozen=True)
class SeedLabelMap:
    """Discrete per-location labels in {0..num_classes}, 0 = background."""

    labels: np.ndarray  # (W, H) int


def compute_seed_area(features: np.ndarray, weights: np.ndarray, class_id: int) -> SeedArea:
    """Project features onto one classifier row and normalize.

    features: (W, H, D); weights: (num_classes, D); class_id in 1..num_classes.
    Negative responses are clamped to 0, then the map is divided by its max
    (skipped when the max is 0).
    """
    features = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if features.ndim != 3 or weights.ndim != 2:
        raise ValueError("features must be (W,H,D) and weights (C,D)")
    if features.shape[2] != weights.shape[1]:
        raise ValueError(
            f"feature dim {features.shape[2]} != weight dim {weights.shape[1]}"
        )
    if not 1 <= class_id <= weights.shape[0]:
        raise ValueError(f"class_id {class_id} outside 1..{weights.shape[0]}")
    raw = features @ weights[class_id - 1]
    clamped = np.maximum(raw, 0.0)
    peak = clamped.max()
    if peak > 0:
        clamped = clamped / peak
    return SeedArea(class_id=class_id, map=clamped)


def raw_seed_map(features: np.ndarray, weights: np.ndarray, class_id: int) -> np.ndarray:
    """The un-clamped, un-normalized projection; linear in the weights."""
    features = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    return features @ weights[class_id - 1]


def seed_label_map(
    seed_areas: list[SeedArea],
    background_threshold: float,
    shape: tuple[int, int] | None = None,
) -> SeedLabelMap:
    """Argmax labeling of normalized seed areas against a background score.

    The background competes with value `background_threshold` at every
    location and loses ties to foreground; foreground ties resolve to the
    lowest class id. An empty seed list yields an all-background map of the
    given `shape`.
    """
    if not 0 < background_threshold < 1:
        raise ValueError("background_threshold must lie in (0, 1)")
    if not seed_areas:
        if shape is None:
            raise ValueError("shape is required when no seed areas are present")
        return empty_label_map(shape)
    shapes = {a.map.shape for a in seed_areas}
    if len(shapes) > 1:
        raise ValueError(f"seed areas disagree on shape: {shapes}")
    ordered = sorted(seed_areas, key=lambda a: a.class_id)
    stack = np.stack([a.map for a in ordered])  # (K, W, H)
    ids = np.array([a.class_id for a in ordered])
    best = np.argmax(stack, axis=0)  # first max -> lowest class id on ties
    best_val = np.take_along_axis(stack, best[None], axis=0)[0]
    labels = np.where(best_val >= background_threshold, ids[best], 0)
    return SeedLabelMap(labels=labels.astype(np.int64))


def empty_label_map(shape: tuple[int, int]) -> SeedLabelMap:
    return SeedLabelMap(labels=np.zeros(shape, dtype=np.int64))


@dataclass
class MetricsReport:
    """Confusion-derived rates for one prediction/ground-truth pair or a split.

    iou is TP/(TP+FP+FN) per class (1 when the class is absent from both
    sides); miou averages background plus all foreground classes. fpr/fnr
    cover foreground classes only, in the selected mode.
    """

    per_class: dict[int, dict[str, float]]
    miou: float
    mean_fpr: float
    mean_fnr: float
    counts: dict[int, dict[str, int]]
    mode: str
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "miou": self.miou,
            "mean_fpr": self.mean_fpr,
            "mean_fnr": self.mean_fnr,
            "counts": {str(k): v for k, v in self.counts.items()},
            "mode": self.mode,
            "flags": self.flags,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv_row(self) -> tuple[str, str]:
        """(header, row) pair for one-line tabulation."""
        cols = ["miou", "mean_fpr", "mean_fnr", "mode"]
        vals = [f"{self.miou:.6f}", f"{self.mean_fpr:.6f}", f"{self.mean_fnr:.6f}", self.mode]
        for cid in sorted(self.per_class):
            for key in ("iou", "fpr", "fnr"):
                cols.append(f"{key}_{cid}")
                vals.append(f"{self.per_class[cid][key]:.6f}")
        return ",".join(cols), ",".join(vals)


def confusion_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> dict[int, dict[str, int]]:
    """Per-class tp/fp/fn/tn over labels in {0..num_classes}."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    n = pred.size
    counts = {}
    for c in range(num_classes + 1):
        tp = int(np.sum((pred == c) & (gt == c)))
        fp = int(np.sum((pred == c) & (gt != c)))
        fn = int(np.sum((pred != c) & (gt == c)))
        counts[c] = {"tp": tp, "fp": fp, "fn": fn, "tn": n - tp - fp - fn}
    return counts


def metrics_from_counts(
    counts: dict[int, dict[str, int]], num_classes: int, mode: str = "conventional"
) -> MetricsReport:
    """Assemble a MetricsReport from accumulated confusion counts."""
    if mode not in ("conventional", "literal"):
        raise ValueError(f"unknown metrics mode {mode!r}")
    flags: list[str] = []

    def rate(num: int, den: int, label: str) -> float:
        if den == 0:
            if num != 0:
                flags.append(f"zero denominator for {label}")
            return 0.0
        return num / den

    ious = {}
    per_class = {}
    for c in range(num_classes + 1):
        k = counts[c]
        denom = k["tp"] + k["fp"] + k["fn"]
        ious[c] = 1.0 if denom == 0 else k["tp"] / denom
        if c == 0:
            continue
        fpr = rate(k["fp"], k["tp"] + k["fp"], f"fpr class {c}")
        if mode == "conventional":
            fnr = rate(k["fn"], k["tp"] + k["fn"], f"fnr class {c}")
        else:
            fnr = rate(k["fn"], k["tp"] + k["fp"] + k["fn"], f"fnr class {c}")
        per_class[c] = {"iou": ious[c], "fpr": fpr, "fnr": fnr}
    foreground = list(range(1, num_classes + 1))
    return MetricsReport(
        per_class=per_class,
        miou=float(np.mean([ious[c] for c in range(num_classes + 1)])),
        mean_fpr=float(np.mean([per_class[c]["fpr"] for c in foreground])),
        mean_fnr=float(np.mean([per_class[c]["fnr"] for c in foreground])),
        counts=counts,
        mode=mode,
    )


def evaluate_seed_metrics(
    pred: SeedLabelMap, gt: SeedLabelMap, num_classes: int, mode: str = "conventional"
) -> MetricsReport:
    """Score a predicted label map against ground truth."""
    p, g = pred.labels, gt.labels
    if p.max(initial=0) > num_classes or g.max(initial=0) > num_classes:
        raise ValueError("labels exceed num_classes")
    return metrics_from_counts(confusion_counts(p, g, num_classes), num_classes, mode)


def add_counts(
    a: dict[int, dict[str, int]], b: dict[int, dict[str, int]]
) -> dict[int, dict[str, int]]:
    """Sum two confusion-count tables (metric accumulation across images)."""
    return {
        c: {k: a[c][k] + b[c][k] for k in ("tp", "fp", "fn", "tn")} for c in a
    }
