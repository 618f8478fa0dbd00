"""Activation-shape regularization: teacher-student consistency at a
temperature, EMA weight transfer, and adjustment-gap schedules."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, clip_min, log, mul, tmean, tsum

ALPHA_FLOOR = 1e-12

STRATEGIES = ("fixed", "linear", "self_adaptive")


@dataclass(frozen=True)
class AdjustmentConfig:
    """Drop-path/dropout rates for both views plus the gap schedule."""

    gamma_t: float = 0.05
    gamma_s_init: float = 0.05
    gamma_s_max: float = 0.15
    delta_s_init: float = 0.0
    delta_s_max: float = 0.01
    strategy: str = "self_adaptive"
    ema_momentum: float = 0.99
    status_momentum: float = 0.9

    def __post_init__(self):
        if not 0 <= self.gamma_t <= self.gamma_s_init <= self.gamma_s_max < 1:
            raise ValueError(
                "require 0 <= gamma_t <= gamma_s_init <= gamma_s_max < 1, got "
                f"({self.gamma_t}, {self.gamma_s_init}, {self.gamma_s_max})"
            )
        if not 0 <= self.delta_s_init <= self.delta_s_max < 1:
            raise ValueError(
                f"require 0 <= delta_s_init <= delta_s_max < 1, got "
                f"({self.delta_s_init}, {self.delta_s_max})"
            )
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        for name in ("ema_momentum", "status_momentum"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0,1), got {v}")


@dataclass(frozen=True)
class LearningStatus:
    """EMA of the mean positive-class classification confidence."""

    value: float = 0.5
    step: int = 0


def _as_const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def sharpen_distribution(alpha: np.ndarray, tau2: float) -> np.ndarray:
    """Raise to 1/tau2 (floored at 1e-12) and renormalize over channels."""
    p = np.maximum(alpha, ALPHA_FLOOR) ** (1.0 / tau2)
    return p / p.sum(axis=-1, keepdims=True)


def sharpened_teacher_entropy(teacher_alpha, tau2: float) -> float:
    """tau2-scaled mean entropy of the sharpened teacher distribution.

    This is the attainable floor of the renormalized consistency loss; the
    loss meets it exactly when the student equals the sharpened teacher.
    """
    p = sharpen_distribution(_as_const(teacher_alpha), tau2)
    plogp = np.where(p > 0, p * np.log(np.maximum(p, ALPHA_FLOOR)), 0.0)
    entropy = -plogp.sum(axis=-1)
    return float(tau2 * entropy.mean())


def reg_loss(student_alpha, teacher_alpha, tau2: float, form: str = "renormalized") -> Tensor:
    """Cross-entropy consistency between two activation distributions.

    The teacher is treated as a constant (no gradient). The renormalized
    form sharpens the teacher to a proper distribution p and returns
    -tau2 * mean_ij sum_c p * log(student); the literal form keeps the
    unnormalized sharpened teacher as the weights.
    """
    if tau2 <= 0:
        raise ValueError(f"tau2 must be positive, got {tau2}")
    if form not in ("renormalized", "literal"):
        raise ValueError(f"unknown reg_loss form {form!r}")
    student = student_alpha if isinstance(student_alpha, Tensor) else Tensor(student_alpha)
    teacher = _as_const(teacher_alpha)
    if teacher.shape != student.data.shape:
        raise ValueError(
            f"shape mismatch: student {student.data.shape} vs teacher {teacher.shape}"
        )
    sharp = np.maximum(teacher, ALPHA_FLOOR) ** (1.0 / tau2)
    if form == "renormalized":
        weights = sharp / sharp.sum(axis=-1, keepdims=True)
    else:
        weights = sharp
    log_student = log(clip_min(student, ALPHA_FLOOR))
    per_location = tsum(mul(Tensor(weights), log_student), axis=-1)
    return mul(tmean(per_location), -tau2)


def ema_update(
    teacher_params: dict[str, np.ndarray],
    student_params: dict[str, np.ndarray],
    momentum: float,
) -> dict[str, np.ndarray]:
    """theta_t <- m * theta_t + (1 - m) * theta_s, elementwise over the tree."""
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0,1), got {momentum}")
    if teacher_params.keys() != student_params.keys():
        missing = set(teacher_params) ^ set(student_params)
        raise ValueError(f"parameter trees differ on keys: {sorted(missing)}")
    out = {}
    for name, t in teacher_params.items():
        s = student_params[name]
        if t.shape != s.shape:
            raise ValueError(f"parameter {name!r} shape mismatch: {t.shape} vs {s.shape}")
        out[name] = momentum * t + (1.0 - momentum) * s
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def update_learning_status(
    status: LearningStatus, scores, labels, momentum: float
) -> LearningStatus:
    """Fold a batch's mean positive-class confidence into the status EMA.

    Images without any positive label are skipped; a batch consisting only
    of such images leaves the status untouched (with a warning).
    """
    scores = _as_const(scores)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[None]
        labels = labels[None]
    if scores.shape != labels.shape or scores.shape[0] == 0:
        raise ValueError("scores and labels must be matching nonempty batches")
    positive_counts = labels.sum(axis=1)
    keep = positive_counts > 0
    if not keep.any():
        warnings.warn("batch has no positive labels; learning status unchanged")
        return status
    conf = _sigmoid(scores[keep])
    lbl = labels[keep]
    per_image = (conf * lbl).sum(axis=1) / lbl.sum(axis=1)
    instantaneous = float(per_image.mean())
    new_value = momentum * status.value + (1.0 - momentum) * instantaneous
    return LearningStatus(value=new_value, step=status.step + 1)


def schedule_adjustment(
    config: AdjustmentConfig, status: LearningStatus, step: int, total_steps: int
) -> tuple[float, float]:
    """Student (drop_path, dropout) rates for the current step.

    fixed: always the maximal rates. linear: interpolate by training
    progress. self_adaptive: interpolate by how far the learning status has
    risen above chance confidence (0.5), clamped to [0, 1].
    """
    if step > total_steps:
        raise ValueError(f"step {step} exceeds total_steps {total_steps}")
    if config.strategy == "fixed":
        return config.gamma_s_max, config.delta_s_max
    if config.strategy == "linear":
        t = step / total_steps if total_steps > 0 else 1.0
    else:
        t = min(max((status.value - 0.5) / 0.5, 0.0), 1.0)
    gamma = config.gamma_s_init + (config.gamma_s_max - config.gamma_s_init) * t
    delta = config.delta_s_init + (config.delta_s_max - config.delta_s_init) * t
    return gamma, delta


def teacher_rates(config: AdjustmentConfig) -> tuple[float, float]:
    """The weak-adjustment view always runs at (gamma_t, 0)."""
    return config.gamma_t, 0.0
