"""Synthetic multi-label scenes: colored shapes on textured backgrounds.

Class ids: 1 = disk, 2 = triangle, 3 = bar (0 = background). Every sample
is a pure function of (seed, index, spec), so datasets can be regenerated
from their manifest and samples can be produced independently in any order.
Ground-truth masks exist only for evaluation; training sees image-level
labels.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container

EVAL_INDEX_OFFSET = 1_000_000

CLASS_NAMES = ("disk", "triangle", "bar")

# saturated anchors; per-shape jitter moves every channel
CLASS_BASE_COLORS = np.array(
    [
        [0.85, 0.25, 0.25],
        [0.25, 0.80, 0.30],
        [0.25, 0.35, 0.85],
    ]
)


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int = 3
    image_size: int = 32
    shapes_per_image: tuple[int, int] = (1, 3)
    shape_scale_range: tuple[float, float] = (0.2, 0.5)
    color_jitter: float = 0.25
    texture_strength: float = 0.15
    overlap_allowed: bool = False

    def __post_init__(self):
        spi = self.shapes_per_image
        if isinstance(spi, int):
            object.__setattr__(self, "shapes_per_image", (spi, spi))
            spi = self.shapes_per_image
        if not (0 <= spi[0] <= spi[1]):
            raise ValueError(f"bad shapes_per_image range {spi}")
        lo, hi = self.shape_scale_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"bad shape_scale_range {self.shape_scale_range}")
        if self.num_classes < 1 or self.num_classes > len(CLASS_NAMES):
            raise ValueError(f"num_classes must lie in 1..{len(CLASS_NAMES)}")

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # (3, S, S) in [0, 1]
    labels: np.ndarray  # (num_classes,) binary
    gt_mask: np.ndarray  # (S, S) ints in {0..num_classes}
    downsampled_gt: np.ndarray  # (S/4, S/4) ints, majority per cell
    index: int = 0


def _smooth(noise: np.ndarray, passes: int = 2) -> np.ndarray:
    """Cheap 3x3 box blur repeated `passes` times."""
    out = noise
    for _ in range(passes):
        padded = np.pad(out, 1, mode="edge")
        out = sum(
            padded[di : di + noise.shape[0], dj : dj + noise.shape[1]]
            for di in range(3)
            for dj in range(3)
        ) / 9.0
    return out


def _shape_mask(kind: int, size: int, canvas: int, top: int, left: int, rng) -> np.ndarray:
    """Rasterize one shape instance into a boolean canvas mask."""
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 1:  # disk
        r = (size - 1) / 2.0
        local = (yy - r) ** 2 + (xx - r) ** 2 <= r**2 + 0.5
    elif kind == 2:  # upward triangle
        # row y spans columns [r/2 - y/2, r/2 + y/2]
        local = np.abs(xx - (size - 1) / 2.0) * 2 <= yy + 0.5
    else:  # bar, 3:1 aspect, horizontal or vertical
        thickness = max(2, size // 3)
        offset = (size - thickness) // 2
        local = np.zeros((size, size), dtype=bool)
        if rng.random() < 0.5:
            local[offset : offset + thickness, :] = True
        else:
            local[:, offset : offset + thickness] = True
    mask = np.zeros((canvas, canvas), dtype=bool)
    mask[top : top + size, left : left + size] = local
    return mask


def generate_sample(seed: int, index: int, spec: SceneSpec) -> Sample:
    """Deterministically render sample `index` of the (seed, spec) dataset."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    s = spec.image_size

    base = rng.uniform(0.15, 0.85, size=3)
    texture = np.stack([_smooth(rng.uniform(-1, 1, (s, s))) for _ in range(3)])
    image = np.clip(base[:, None, None] + spec.texture_strength * texture, 0.0, 1.0)

    gt = np.zeros((s, s), dtype=np.int64)
    occupied = np.zeros((s, s), dtype=bool)
    count = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    for _ in range(count):
        cls = int(rng.integers(1, spec.num_classes + 1))
        scale = float(rng.uniform(*spec.shape_scale_range))
        placed = False
        for attempt_round in range(2):
            size = max(3, int(round(scale * s)))
            if size > s:
                size = s
            for _ in range(100):
                top = int(rng.integers(0, s - size + 1))
                left = int(rng.integers(0, s - size + 1))
                mask = _shape_mask(cls, size, s, top, left, rng)
                if spec.overlap_allowed or not (mask & occupied).any():
                    placed = True
                    break
            if placed:
                break
            scale *= 0.6  # retry smaller before giving up
        if not placed:
            warnings.warn(f"sample {index}: could not place a shape, emitting fewer")
            continue
        color = CLASS_BASE_COLORS[cls - 1] + rng.uniform(
            -spec.color_jitter, spec.color_jitter, size=3
        )
        color = np.clip(color * rng.uniform(0.7, 1.1), 0.0, 1.0)
        image[:, mask] = color[:, None]
        gt[mask] = cls
        occupied |= mask

    labels = np.array(
        [1 if (gt == c).any() else 0 for c in range(1, spec.num_classes + 1)],
        dtype=np.int64,
    )
    return Sample(
        image=image,
        labels=labels,
        gt_mask=gt,
        downsampled_gt=downsample_majority(gt, 4, spec.num_classes),
        index=index,
    )


def downsample_majority(mask: np.ndarray, cell: int, num_classes: int) -> np.ndarray:
    """Majority label per cell x cell block; background wins ties, then lowest id."""
    s = mask.shape[0]
    g = s // cell
    blocks = mask.reshape(g, cell, g, cell).transpose(0, 2, 1, 3).reshape(g, g, cell * cell)
    out = np.zeros((g, g), dtype=np.int64)
    for i in range(g):
        for j in range(g):
            counts = np.bincount(blocks[i, j], minlength=num_classes + 1)
            top = counts.max()
            winners = np.flatnonzero(counts == top)
            out[i, j] = 0 if winners[0] == 0 else winners[0]
    return out


def generate_dataset(
    seed: int, count: int, spec: SceneSpec, split: str = "train"
) -> tuple[list[Sample], dict]:
    """Samples plus a manifest sufficient to regenerate them bit-exactly."""
    if count <= 0:
        raise ValueError("count must be positive")
    if split not in ("train", "eval"):
        raise ValueError(f"unknown split {split!r}")
    offset = 0 if split == "train" else EVAL_INDEX_OFFSET
    samples = [generate_sample(seed, offset + i, spec) for i in range(count)]
    freq = np.mean([s.labels for s in samples], axis=0)
    manifest = {
        "seed": seed,
        "split": split,
        "count": count,
        "index_offset": offset,
        "spec": asdict(spec),
        "spec_digest": spec.digest(),
        "class_frequencies": [float(f) for f in freq],
    }
    return samples, manifest


def save_dataset(directory: str | Path, samples: list[Sample], manifest: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {}
    for s in samples:
        key = f"sample{s.index:07d}"
        tensors[f"{key}.image"] = s.image
        tensors[f"{key}.labels"] = s.labels.astype(np.float64)
        tensors[f"{key}.gt_mask"] = s.gt_mask.astype(np.float64)
        tensors[f"{key}.downsampled_gt"] = s.downsampled_gt.astype(np.float64)
    container.write_tensors(directory / "samples.bin", tensors)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(directory: str | Path) -> tuple[list[Sample], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = container.read_tensors(directory / "samples.bin")
    keys = sorted({name.split(".")[0] for name in tensors})
    samples = []
    for key in keys:
        samples.append(
            Sample(
                image=tensors[f"{key}.image"],
                labels=tensors[f"{key}.labels"].astype(np.int64),
                gt_mask=tensors[f"{key}.gt_mask"].astype(np.int64),
                downsampled_gt=tensors[f"{key}.downsampled_gt"].astype(np.int64),
                index=int(key.replace("sample", "")),
            )
        )
    return samples, manifest
