"""Training loop for seed-area models: generation loss for any mapping,
optional teacher-student regularization with EMA and scheduled adjustment,
plus evaluation and multi-variant comparison runs."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container
from .autodiff import NonFiniteError, Tensor, no_grad
from .backbones import (
    AdjustmentRates,
    BackboneConfig,
    RandomStream,
    forward_features_batch,
    init_backbone,
)
from .data import Sample
from .mappings import (
    ClassifierHead,
    generation_loss,
    score_gap,
    score_mct,
    score_usage,
    score_weighted,
    spatial_activation_distribution,
)
from .regularize import (
    AdjustmentConfig,
    LearningStatus,
    ema_update,
    reg_loss,
    schedule_adjustment,
    teacher_rates,
    update_learning_status,
)
from .seeds import (
    MetricsReport,
    add_counts,
    compute_seed_area,
    confusion_counts,
    metrics_from_counts,
    seed_label_map,
)

MAPPINGS = ("cam_gap", "mil", "mct", "usage")

TEACHER_STREAM_SALT = 0x5EED7EAC

DEFAULT_TAU1 = {"transformer": 1.0, "conv": 50.0}


class RunAbort(RuntimeError):
    """Training produced a non-finite loss; carries the offending step."""

    def __init__(self, step: int, cause: str):
        super().__init__(f"training aborted at step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"  # "adam" | "sgd_momentum"
    learning_rate: float = 3e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be nonnegative")


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mapping: str = "usage"
    num_classes: int = 3
    tau1: float | None = None
    tau2: float = 0.1
    lam: float = 0.25
    adjustment: AdjustmentConfig | None = field(default_factory=AdjustmentConfig)
    regularization_enabled: bool = True
    reg_form: str = "renormalized"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    metrics_mode: str = "conventional"
    background_threshold: float = 0.4
    background_logit: float = 0.0
    evaluate_teacher: bool = False

    def __post_init__(self):
        if self.mapping not in MAPPINGS:
            raise ValueError(f"mapping must be one of {MAPPINGS}")
        if self.mapping == "usage" and self.tau1 is None:
            object.__setattr__(self, "tau1", DEFAULT_TAU1[self.backbone.kind])
        if self.mapping == "usage" and self.tau1 <= 0:
            raise ValueError("usage mapping requires tau1 > 0")
        if self.regularization_enabled and self.adjustment is None:
            raise ValueError("regularization requires an adjustment config")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    def resolved_tau1(self) -> float:
        if self.tau1 is not None:
            return self.tau1
        return DEFAULT_TAU1[self.backbone.kind]


@dataclass
class RunResult:
    student_params: dict
    teacher_params: dict
    epoch_log: list[dict]
    metrics: MetricsReport
    wall_seconds: float
    config: RunConfig


def head_parameter_shapes(config: RunConfig) -> dict[str, tuple]:
    d = config.backbone.feature_dim
    shapes = {"head.w": (config.num_classes, d)}
    if config.mapping == "mct":
        shapes.update(
            {
                "head.mct.w1": (d, d),
                "head.mct.b1": (d,),
                "head.mct.w2": (d, d),
                "head.mct.b2": (d,),
            }
        )
    return shapes


def init_model(config: RunConfig) -> dict[str, np.ndarray]:
    """Backbone plus classifier head parameters, deterministic in the seed."""
    params = init_backbone(config.backbone, config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC1]))
    for name, shape in head_parameter_shapes(config).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[-1] if name == "head.w" else shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def _head_from(params: dict, config: RunConfig) -> ClassifierHead:
    mct = None
    if config.mapping == "mct":
        mct = {
            "w1": params["head.mct.w1"],
            "b1": params["head.mct.b1"],
            "w2": params["head.mct.w2"],
            "b2": params["head.mct.b2"],
        }
    return ClassifierHead(
        weights=params["head.w"],
        background_logit=config.background_logit,
        mct_mlp=mct,
    )


def mapping_score(features, head: ClassifierHead, config: RunConfig):
    if config.mapping == "cam_gap":
        return score_gap(features, head)
    if config.mapping == "mil":
        return score_weighted(features, head)
    if config.mapping == "mct":
        return score_mct(features, head)
    return score_usage(features, head, config.resolved_tau1())


def epoch_batches(seed: int, epoch: int, count: int, batch_size: int) -> list[np.ndarray]:
    """Deterministic shuffled batch index lists for one epoch."""
    order = np.random.default_rng(np.random.SeedSequence([seed, 0xED, epoch])).permutation(count)
    return [order[i : i + batch_size] for i in range(0, count, batch_size)]


class Optimizer:
    """Adam or SGD-with-momentum over a named parameter dict.

    Weight decay is classic L2 added to the gradient. Parameter order is
    fixed by sorted names so updates are reproducible.
    """

    def __init__(self, config: OptimizerConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.state = {
            name: {"m": np.zeros_like(v), "v": np.zeros_like(v)} for name, v in params.items()
        }
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict:
        c = self.config
        self.t += 1
        out = {}
        for name in sorted(params):
            p = params[name]
            g = grads[name] + c.weight_decay * p
            st = self.state[name]
            if c.kind == "adam":
                st["m"] = c.beta1 * st["m"] + (1 - c.beta1) * g
                st["v"] = c.beta2 * st["v"] + (1 - c.beta2) * g * g
                mhat = st["m"] / (1 - c.beta1**self.t)
                vhat = st["v"] / (1 - c.beta2**self.t)
                out[name] = p - c.learning_rate * mhat / (np.sqrt(vhat) + c.eps)
            else:
                st["m"] = c.momentum * st["m"] + g
                out[name] = p - c.learning_rate * st["m"]
        return out


def _batch_arrays(dataset: list[Sample], idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([dataset[i].image for i in idx])
    labels = np.stack([dataset[i].labels for i in idx])
    return images, labels


def train_step(
    config: RunConfig,
    student: dict[str, np.ndarray],
    teacher: dict[str, np.ndarray],
    optimizer: Optimizer,
    status: LearningStatus,
    images: np.ndarray,
    labels: np.ndarray,
    step: int,
    total_steps: int,
) -> tuple[dict, dict, LearningStatus, dict]:
    """One optimization step; returns (student, teacher, status, log entry)."""
    reg_on = config.regularization_enabled
    if reg_on:
        gamma_s, delta_s = schedule_adjustment(config.adjustment, status, step, total_steps)
        student_rates = AdjustmentRates(gamma_s, delta_s, RandomStream(config.seed, step))
        gamma_t, delta_t = teacher_rates(config.adjustment)
        t_rates = AdjustmentRates(
            gamma_t, delta_t, RandomStream(config.seed ^ TEACHER_STREAM_SALT, step)
        )
    else:
        gamma_s = delta_s = 0.0
        student_rates = AdjustmentRates()

    tensors = {name: Tensor(v) for name, v in student.items()}
    head = _head_from(tensors, config)
    try:
        features = forward_features_batch(
            config.backbone, tensors, images, student_rates, "train"
        )
        scores = mapping_score(features, head, config)
        loss_gen = generation_loss(scores, labels)
        loss_reg_value = 0.0
        if reg_on:
            with no_grad():
                teacher_features = forward_features_batch(
                    config.backbone, teacher, images, t_rates, "train"
                )
                teacher_head = _head_from(teacher, config)
                teacher_alpha = spatial_activation_distribution(
                    teacher_features, teacher_head
                ).data
            student_alpha = spatial_activation_distribution(features, head)
            loss_reg = reg_loss(student_alpha, teacher_alpha, config.tau2, config.reg_form)
            loss_reg_value = float(loss_reg.data)
            total = loss_gen + loss_reg * config.lam
        else:
            total = loss_gen
        total.backward()
    except NonFiniteError as err:
        raise RunAbort(step, str(err)) from err
    if not np.isfinite(total.data):
        raise RunAbort(step, "non-finite loss")

    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }
    new_student = optimizer.step(student, grads)
    momentum = config.adjustment.ema_momentum if config.adjustment else 0.99
    new_teacher = ema_update(teacher, new_student, momentum)
    status_momentum = config.adjustment.status_momentum if config.adjustment else 0.9
    new_status = update_learning_status(status, scores.data, labels, status_momentum)
    entry = {
        "step": step,
        "gen_loss": float(loss_gen.data),
        "reg_loss": loss_reg_value,
        "status": new_status.value,
        "gamma_s": gamma_s,
        "delta_s": delta_s,
    }
    return new_student, new_teacher, new_status, entry


def train_seed_model(config: RunConfig, dataset: list[Sample], eval_dataset: list[Sample] | None = None) -> RunResult:
    """Optimize the two-term objective over `dataset`; evaluate on `eval_dataset`.

    Deterministic given (config, dataset): batch order, initialization,
    and all stochastic adjustments derive from config.seed.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    started = time.perf_counter()
    student = init_model(config)
    teacher = {k: v.copy() for k, v in student.items()}
    optimizer = Optimizer(config.optimizer, student)
    status = LearningStatus()
    batches_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = config.epochs * batches_per_epoch

    epoch_log: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        entries = []
        for idx in epoch_batches(config.seed, epoch, len(dataset), config.batch_size):
            images, labels = _batch_arrays(dataset, idx)
            student, teacher, status, entry = train_step(
                config, student, teacher, optimizer, status, images, labels, step, total_steps
            )
            entries.append(entry)
            step += 1
        epoch_log.append(
            {
                "epoch": epoch,
                "gen_loss": float(np.mean([e["gen_loss"] for e in entries])),
                "reg_loss": float(np.mean([e["reg_loss"] for e in entries])),
                "status": entries[-1]["status"],
                "gamma_s": entries[-1]["gamma_s"],
                "delta_s": entries[-1]["delta_s"],
            }
        )

    eval_params = teacher if config.evaluate_teacher else student
    metrics = (
        evaluate_model(eval_params, eval_dataset, config)
        if eval_dataset
        else evaluate_model(eval_params, dataset, config)
    )
    return RunResult(
        student_params=student,
        teacher_params=teacher,
        epoch_log=epoch_log,
        metrics=metrics,
        wall_seconds=time.perf_counter() - started,
        config=config,
    )


def evaluate_model(params: dict, dataset: list[Sample], config: RunConfig) -> MetricsReport:
    """Seed-area quality of `params` on a dataset, at the feature grid.

    Per sample: eval-mode forward, per-present-class seed areas, argmax
    labeling against the background threshold, confusion counts accumulated
    globally against the downsampled ground truth.
    """
    total = None
    weights = params["head.w"]
    grid = tuple(config.backbone.feature_grid)
    with no_grad():
        for sample in dataset:
            features = forward_features_batch(
                config.backbone, params, sample.image[None], mode="eval"
            ).data[0]
            present = [c + 1 for c in range(config.num_classes) if sample.labels[c] == 1]
            areas = [compute_seed_area(features, weights, cid) for cid in present]
            pred = seed_label_map(areas, config.background_threshold, shape=grid)
            counts = confusion_counts(pred.labels, sample.downsampled_gt, config.num_classes)
            total = counts if total is None else add_counts(total, counts)
    if total is None:
        raise ValueError("dataset must be nonempty")
    return metrics_from_counts(total, config.num_classes, config.metrics_mode)


# ---------------------------------------------------------------------------
# comparison runs


VARIANTS = ("cam", "mil", "mct", "usage", "usage_noreg", "usage_fixed", "usage_linear")


def variant_config(variant: str, backbone_kind: str, seed: int, base: RunConfig | None = None) -> RunConfig:
    """Named experiment presets over a shared base configuration."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    base = base or RunConfig()
    backbone = replace(base.backbone, kind=backbone_kind)
    common = dict(backbone=backbone, seed=seed, tau1=None)
    if variant == "cam":
        return replace(base, mapping="cam_gap", regularization_enabled=False, lam=0.0, **common)
    if variant == "mil":
        return replace(base, mapping="mil", regularization_enabled=False, lam=0.0, **common)
    if variant == "mct":
        return replace(base, mapping="mct", regularization_enabled=False, lam=0.0, **common)
    if variant == "usage_noreg":
        return replace(base, mapping="usage", regularization_enabled=False, lam=0.0, **common)
    adjustment = base.adjustment or AdjustmentConfig()
    if variant == "usage_fixed":
        adjustment = replace(adjustment, strategy="fixed")
    elif variant == "usage_linear":
        adjustment = replace(adjustment, strategy="linear")
    return replace(
        base,
        mapping="usage",
        regularization_enabled=True,
        adjustment=adjustment,
        **common,
    )


@dataclass
class ComparisonRow:
    name: str
    miou_mean: float
    miou_range: float
    fpr_mean: float
    fpr_range: float
    fnr_mean: float
    fnr_range: float
    seeds: int
    aborted: int


def run_comparison(
    variant_names: list[str],
    backbones: list[str],
    train_set: list[Sample],
    eval_set: list[Sample],
    seeds: list[int],
    base: RunConfig | None = None,
    progress=None,
) -> tuple[list[ComparisonRow], dict]:
    """Train every (variant, backbone) pair per seed; aggregate metrics.

    An aborted run is recorded and skipped; the remaining variants still
    run. Returns (rows, per-run detail dict).
    """
    if len(variant_names) * len(backbones) < 2:
        raise ValueError("comparison needs at least two variants")
    if not seeds:
        raise ValueError("comparison needs at least one seed")
    rows: list[ComparisonRow] = []
    detail: dict[str, dict] = {}
    for variant in variant_names:
        for kind in backbones:
            name = f"{variant}_{kind}"
            per_seed = []
            aborted = 0
            for seed in seeds:
                config = variant_config(variant, kind, seed, base)
                try:
                    result = train_seed_model(config, train_set, eval_set)
                except RunAbort as err:
                    aborted += 1
                    detail[f"{name}_seed{seed}"] = {"aborted": True, "error": str(err)}
                    continue
                m = result.metrics
                per_seed.append((m.miou, m.mean_fpr, m.mean_fnr))
                detail[f"{name}_seed{seed}"] = {
                    "miou": m.miou,
                    "mean_fpr": m.mean_fpr,
                    "mean_fnr": m.mean_fnr,
                    "wall_seconds": result.wall_seconds,
                }
                if progress:
                    progress(name, seed, m)
            if per_seed:
                arr = np.array(per_seed)
                rows.append(
                    ComparisonRow(
                        name=name,
                        miou_mean=float(arr[:, 0].mean()),
                        miou_range=float(arr[:, 0].max() - arr[:, 0].min()),
                        fpr_mean=float(arr[:, 1].mean()),
                        fpr_range=float(arr[:, 1].max() - arr[:, 1].min()),
                        fnr_mean=float(arr[:, 2].mean()),
                        fnr_range=float(arr[:, 2].max() - arr[:, 2].min()),
                        seeds=len(per_seed),
                        aborted=aborted,
                    )
                )
            else:
                rows.append(ComparisonRow(name, math.nan, 0.0, math.nan, 0.0, math.nan, 0.0, 0, aborted))
    return rows, detail


def comparison_csv(rows: list[ComparisonRow]) -> str:
    lines = ["name,miou_mean,miou_range,fpr_mean,fpr_range,fnr_mean,fnr_range,seeds,aborted"]
    for r in rows:
        lines.append(
            f"{r.name},{r.miou_mean:.6f},{r.miou_range:.6f},{r.fpr_mean:.6f},"
            f"{r.fpr_range:.6f},{r.fnr_mean:.6f},{r.fnr_range:.6f},{r.seeds},{r.aborted}"
        )
    return "\n".join(lines) + "\n"


def comparison_text(rows: list[ComparisonRow]) -> str:
    header = f"{'variant':24s} {'mIoU':>14s} {'FPR':>14s} {'FNR':>14s}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.name:24s} {r.miou_mean:.4f}±{r.miou_range / 2:.4f} "
            f"{r.fpr_mean:.4f}±{r.fpr_range / 2:.4f} {r.fnr_mean:.4f}±{r.fnr_range / 2:.4f}"
        )
    deltas = ["", "pairwise mIoU deltas (row - column):"]
    for a in rows:
        for b in rows:
            if a.name < b.name:
                deltas.append(f"  {a.name} vs {b.name}: {a.miou_mean - b.miou_mean:+.4f}")
    return "\n".join(lines + deltas) + "\n"


# ---------------------------------------------------------------------------
# serialization


def config_to_dict(config: RunConfig) -> dict:
    out = asdict(config)
    out["tau1"] = config.resolved_tau1() if config.mapping in ("usage",) else config.tau1
    return out


def save_run(directory: str | Path, result: RunResult) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    container.write_tensors(directory / "checkpoint_student.bin", result.student_params)
    container.write_tensors(directory / "checkpoint_teacher.bin", result.teacher_params)
    payload = {
        "config": config_to_dict(result.config),
        "epoch_log": result.epoch_log,
        "metrics": json.loads(result.metrics.to_json()),
        "wall_seconds": result.wall_seconds,
    }
    (directory / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    (directory / "metrics.json").write_text(result.metrics.to_json())
