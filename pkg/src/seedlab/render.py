"""PNG panels for visual inspection: input, per-class seed heatmaps, the
discretized seed labels, and ground truth, side by side."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import CLASS_BASE_COLORS, Sample
from .seeds import SeedArea, SeedLabelMap

PANEL = 256

# compact viridis-like ramp, linearly interpolated
_RAMP = np.array(
    [
        [0.267, 0.005, 0.329],
        [0.283, 0.141, 0.458],
        [0.254, 0.265, 0.530],
        [0.207, 0.372, 0.553],
        [0.164, 0.471, 0.558],
        [0.128, 0.567, 0.551],
        [0.135, 0.659, 0.518],
        [0.267, 0.749, 0.441],
        [0.478, 0.821, 0.318],
        [0.741, 0.873, 0.150],
        [0.993, 0.906, 0.144],
    ]
)

_BACKGROUND_GRAY = np.array([0.15, 0.15, 0.15])


def colormap(values: np.ndarray) -> np.ndarray:
    """Map [0,1] scalars to RGB via the fixed ramp."""
    v = np.clip(values, 0.0, 1.0) * (len(_RAMP) - 1)
    lo = np.floor(v).astype(int)
    hi = np.minimum(lo + 1, len(_RAMP) - 1)
    t = (v - lo)[..., None]
    return _RAMP[lo] * (1 - t) + _RAMP[hi] * t


def label_colors(labels: np.ndarray) -> np.ndarray:
    """Class-id map to RGB; background is dark gray."""
    out = np.empty(labels.shape + (3,))
    out[:] = _BACKGROUND_GRAY
    for cid in range(1, CLASS_BASE_COLORS.shape[0] + 1):
        out[labels == cid] = CLASS_BASE_COLORS[cid - 1]
    return out


def _upsample(rgb: np.ndarray, size: int = PANEL) -> np.ndarray:
    """Nearest-neighbor upsampling to size x size."""
    reps = size // rgb.shape[0]
    out = np.repeat(np.repeat(rgb, reps, axis=0), reps, axis=1)
    return out


def sample_panel(
    sample: Sample,
    seed_areas: list[SeedArea],
    pred: SeedLabelMap,
    num_classes: int,
) -> np.ndarray:
    """Horizontal strip: input | per-class heatmaps | seed labels | GT."""
    tiles = [_upsample(np.transpose(sample.image, (1, 2, 0)))]
    by_class = {a.class_id: a.map for a in seed_areas}
    grid = pred.labels.shape
    for cid in range(1, num_classes + 1):
        area = by_class.get(cid, np.zeros(grid))
        tiles.append(_upsample(colormap(area)))
    tiles.append(_upsample(label_colors(pred.labels)))
    tiles.append(_upsample(label_colors(sample.downsampled_gt)))
    gap = np.ones((PANEL, 4, 3))
    strip: list[np.ndarray] = []
    for i, tile in enumerate(tiles):
        if i:
            strip.append(gap)
        strip.append(tile)
    return np.concatenate(strip, axis=1)


def save_panel(path: str | Path, panel: np.ndarray) -> None:
    img = Image.fromarray((np.clip(panel, 0, 1) * 255).astype(np.uint8))
    img.save(Path(path))
