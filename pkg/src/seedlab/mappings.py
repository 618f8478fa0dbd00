"""Classifier mappings from dense features to class scores.

Four routes are provided: global-average-pooling (the CAM classifier),
temperature-controlled weighted pooling, its temperature-1 special case
(the multiple-instance-learning form), and attention-style pooling where
raw activation values weight an MLP-pooled patch feature.

Features are (..., W, H, D) with any leading batch dims; class scores are
(..., C) pre-sigmoid logits. All functions accept Tensors (gradients flow)
or plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    clip_min,
    concat,
    div,
    gelu,
    matmul,
    mul,
    power,
    relu,
    reshape,
    slice_last,
    softmax,
    softplus,
    sub,
    tmean,
    transpose,
    tsum,
)

ALPHA_FLOOR = 1e-12


@dataclass
class ClassifierHead:
    """Linear classifier over feature channels plus a constant background logit.

    `weights` is (num_classes, D). `mct_mlp` holds the patch-pooling MLP
    parameters (w1, b1, w2, b2) and must be present exactly when the
    attention-style mapping is used.
    """

    weights: object  # (C, D) Tensor or ndarray
    background_logit: float = 0.0
    mct_mlp: dict | None = None

    @property
    def num_classes(self) -> int:
        w = self.weights.data if isinstance(self.weights, Tensor) else self.weights
        return w.shape[0]


@dataclass(frozen=True)
class SpatialActivationDistribution:
    """Per-location probabilities over foreground classes plus background.

    alpha is (..., W, H, C+1); the background channel is last.
    """

    alpha: np.ndarray
    background_channel_index: int = field(default=-1)

    def __post_init__(self):
        object.__setattr__(self, "background_channel_index", self.alpha.shape[-1] - 1)

    def channel_sums(self) -> np.ndarray:
        return self.alpha.sum(axis=-1)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_dims(features: Tensor, weights: Tensor) -> None:
    if features.data.ndim < 3:
        raise ValueError("features must be (..., W, H, D)")
    if features.data.shape[-1] != weights.data.shape[-1]:
        raise ValueError(
            f"feature dim {features.data.shape[-1]} != classifier dim "
            f"{weights.data.shape[-1]}"
        )


def activation_volume(features, head: ClassifierHead) -> Tensor:
    """Per-location, per-class activation: out[..., i, j, c] = sum_d w[c,d] * A[..., i, j, d]."""
    features = _lift(features)
    weights = _lift(head.weights)
    _check_dims(features, weights)
    return matmul(features, transpose(weights, (1, 0)))


def score_gap(features, head: ClassifierHead) -> Tensor:
    """Global-average-pooled class scores (the CAM classifier)."""
    vol = activation_volume(features, head)
    return tmean(vol, axis=(-3, -2))


def _alpha_from_volume(vol: Tensor, background_logit: float) -> Tensor:
    bg_shape = vol.data.shape[:-1] + (1,)
    bg = Tensor(np.full(bg_shape, float(background_logit)))
    return softmax(concat([vol, bg], axis=-1), axis=-1)


def spatial_activation_distribution(features, head: ClassifierHead) -> Tensor:
    """Softmax over per-location class activations plus a constant background logit.

    Returns (..., W, H, C+1); the background channel is last and uses
    head.background_logit at every location.
    """
    vol = activation_volume(features, head)
    return _alpha_from_volume(vol, head.background_logit)


def foreground_alpha(features, head: ClassifierHead) -> tuple[Tensor, Tensor]:
    """(activation volume, foreground slice of the activation distribution)."""
    vol = activation_volume(features, head)
    alpha = _alpha_from_volume(vol, head.background_logit)
    return vol, slice_last(alpha, vol.data.shape[-1])


def _pooled_score(vol: Tensor, weight: Tensor) -> Tensor:
    num = tsum(mul(weight, vol), axis=(-3, -2))
    den = tsum(weight, axis=(-3, -2))
    return div(num, den)


def score_usage(features, head: ClassifierHead, tau1: float) -> Tensor:
    """Weighted pooling of activation values by the sharpened (or smoothed)
    spatial activation distribution; gradient flows through both factors.

    tau1 < 1 sharpens the pooling toward the strongest locations; large tau1
    approaches global average pooling.
    """
    if tau1 <= 0:
        raise ValueError(f"tau1 must be positive, got {tau1}")
    vol, fg = foreground_alpha(features, head)
    weight = power(fg, 1.0 / tau1, floor=ALPHA_FLOOR)
    return _pooled_score(vol, weight)


def score_weighted(features, head: ClassifierHead) -> Tensor:
    """Distribution-weighted pooling at unit temperature (the MIL form)."""
    vol, fg = foreground_alpha(features, head)
    weight = clip_min(fg, ALPHA_FLOOR)
    return _pooled_score(vol, weight)


def score_mct(features, head: ClassifierHead) -> Tensor:
    """Attention-style scores: clamped activation values weight an MLP-pooled
    patch feature; the denominator is stabilized with 1e-8."""
    if head.mct_mlp is None:
        raise ValueError("score_mct requires head.mct_mlp")
    features = _lift(features)
    vol = activation_volume(features, head)
    beta = relu(vol)
    p = head.mct_mlp
    hidden = gelu(matmul(features, _lift(p["w1"])) + _lift(p["b1"]))
    pooled = tmean(matmul(hidden, _lift(p["w2"])) + _lift(p["b2"]), axis=-1)
    pooled = _expand_last(pooled)
    num = tsum(mul(beta, pooled), axis=(-3, -2))
    den = tsum(beta, axis=(-3, -2)) + 1e-8
    return div(num, den)


def _expand_last(t: Tensor) -> Tensor:
    return reshape(t, t.data.shape + (1,))


def generation_loss(scores, labels) -> Tensor:
    """Mean binary cross entropy between sigmoid(scores) and multi-hot labels.

    Uses the softplus(s) - y*s identity, which is exact and overflow-safe.
    Averages over classes, then over any leading batch dims.
    """
    scores = _lift(scores)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != scores.data.shape:
        raise ValueError(f"labels shape {labels.shape} != scores shape {scores.data.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    per_class = sub(softplus(scores), mul(scores, Tensor(labels)))
    return tmean(per_class)
