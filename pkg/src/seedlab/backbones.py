"""Toy feature extractors with a local-vs-global contrast.

The conv backbone stacks 3x3 convolutions (two stride-2 downsamples, then
residual blocks) so every feature location sees a receptive field strictly
smaller than the image. The transformer backbone embeds 4x4 patches and
runs pre-norm attention blocks, so every location attends globally.

Both expose drop-path (per sample, per residual branch) and dropout (per
activation) injection points with inverted scaling, driven by a
counter-based random stream so runs are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    extract_patches,
    gelu,
    layernorm,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    transpose,
)

LN_EPS = 1e-6


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "transformer"  # "conv" | "transformer"
    input_size: tuple[int, int, int] = (3, 32, 32)
    feature_dim: int = 64
    depth: int = 4
    heads: int = 4
    patch_size: int = 4
    feature_grid: tuple[int, int] = (8, 8)
    mlp_ratio: int = 2

    def __post_init__(self):
        c, h, w = self.input_size
        if self.kind not in ("conv", "transformer"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "transformer":
            if h % self.patch_size or w % self.patch_size:
                raise ValueError("input size must be divisible by patch_size")
            grid = (h // self.patch_size, w // self.patch_size)
            if grid != tuple(self.feature_grid):
                raise ValueError(f"feature_grid {self.feature_grid} != {grid} from patching")
            if self.feature_dim % self.heads:
                raise ValueError("feature_dim must be divisible by heads")
        else:
            if self.depth < 2:
                raise ValueError("conv backbone needs depth >= 2")
            stride_total = 4  # two stride-2 layers
            grid = (h // stride_total, w // stride_total)
            if grid != tuple(self.feature_grid):
                raise ValueError(f"feature_grid {self.feature_grid} != {grid} from striding")

    @property
    def tokens(self) -> int:
        return self.feature_grid[0] * self.feature_grid[1]


class RandomStream:
    """Counter-based Philox stream keyed by (seed, step).

    Draws for distinct (layer, salt) sites never overlap: the site selects
    the high counter words, generation only advances the low word.
    """

    def __init__(self, seed: int, step: int = 0):
        self.seed = int(seed)
        self.step = int(step)

    def uniform(self, shape, layer: int, salt: int = 0) -> np.ndarray:
        bitgen = np.random.Philox(
            key=np.array([self.seed & (2**64 - 1), 0], dtype=np.uint64),
            counter=np.array([0, self.step, layer, salt], dtype=np.uint64),
        )
        return np.random.Generator(bitgen).random(shape)


@dataclass(frozen=True)
class AdjustmentRates:
    """Stochastic-adjustment strengths for one forward pass."""

    drop_path: float = 0.0
    dropout: float = 0.0
    stream: RandomStream | None = None

    def __post_init__(self):
        if not (0 <= self.drop_path <= 1 and 0 <= self.dropout <= 1):
            raise ValueError("rates must lie in [0, 1]")
        if (self.drop_path > 0 or self.dropout > 0) and self.stream is None:
            raise ValueError("nonzero rates require a RandomStream")


ZERO_RATES = AdjustmentRates()


def _drop_path(x: Tensor, rate: float, stream: RandomStream, layer: int) -> Tensor:
    """Per-sample branch gating with inverted scaling (rate 1 kills the branch)."""
    if rate <= 0:
        return x
    if rate >= 1:
        return mul(x, 0.0)
    batch = x.data.shape[0]
    u = stream.uniform((batch,) + (1,) * (x.data.ndim - 1), layer=layer, salt=0)
    mask = (u >= rate).astype(np.float64) / (1.0 - rate)
    return mul(x, Tensor(mask))


def _dropout(x: Tensor, rate: float, stream: RandomStream, layer: int) -> Tensor:
    """Per-activation masking with inverted scaling."""
    if rate <= 0:
        return x
    if rate >= 1:
        return mul(x, 0.0)
    u = stream.uniform(x.data.shape, layer=layer, salt=1)
    mask = (u >= rate).astype(np.float64) / (1.0 - rate)
    return mul(x, Tensor(mask))


def _layernorm(x: Tensor, gain: Tensor, offset: Tensor) -> Tensor:
    return layernorm(x, gain, offset, eps=LN_EPS)


# ---------------------------------------------------------------------------
# parameter shapes and initialization


def conv_layer_specs(config: BackboneConfig) -> list[tuple[int, int, int]]:
    """(kernel, stride, pad) per conv layer, in forward order."""
    return [(3, 2, 1), (3, 2, 1)] + [(3, 1, 1)] * (config.depth - 2)


def parameter_shapes(config: BackboneConfig) -> dict[str, tuple]:
    d = config.feature_dim
    shapes: dict[str, tuple] = {}
    if config.kind == "conv":
        c_in = config.input_size[0]
        shapes["stem.w"] = (d, c_in, 3, 3)
        shapes["stem.b"] = (d,)
        shapes["down.w"] = (d, d, 3, 3)
        shapes["down.b"] = (d,)
        for i in range(config.depth - 2):
            shapes[f"res{i}.w"] = (d, d, 3, 3)
            shapes[f"res{i}.b"] = (d,)
        return shapes
    patch_dim = config.input_size[0] * config.patch_size**2
    hidden = config.mlp_ratio * d
    shapes["embed.w"] = (patch_dim, d)
    shapes["embed.b"] = (d,)
    shapes["pos"] = (config.tokens, d)
    for i in range(config.depth):
        p = f"blk{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for proj in ("wq", "wk", "wv"):
            shapes[p + proj] = (d, d)
            shapes[p + proj.replace("w", "b")] = (d,)
        shapes[p + "proj.w"] = (d, d)
        shapes[p + "proj.b"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "fc1.w"] = (d, hidden)
        shapes[p + "fc1.b"] = (hidden,)
        shapes[p + "fc2.w"] = (hidden, d)
        shapes[p + "fc2.b"] = (d,)
    return shapes


def parameter_count(config: BackboneConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


def init_backbone(config: BackboneConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic init: fan-in-scaled uniform weights, zero biases,
    unit-gain zero-offset norms, small uniform positional table."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB]))
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name == "pos":
            params[name] = rng.uniform(-0.02, 0.02, size=shape)
        elif name.rsplit(".", 1)[-1] == "g":
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            # conv kernels are (out, in, k, k); linear weights are (in, out)
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# ---------------------------------------------------------------------------
# forward passes


def _lift_params(params: dict) -> dict[str, Tensor]:
    return {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in params.items()}


def _conv(x: Tensor, w: Tensor, b: Tensor, stride: int, pad: int) -> Tensor:
    k = w.data.shape[-1]
    out_ch = w.data.shape[0]
    patches = extract_patches(x, k, stride, pad)  # (B, H', W', C*k*k)
    w2 = transpose(reshape(w, (out_ch, -1)), (1, 0))
    return add(matmul(patches, w2), b)  # (B, H', W', out_ch)


def _to_nchw(x: Tensor) -> Tensor:
    return transpose(x, (0, 3, 1, 2))


def _forward_conv(config, p, images, rates, train: bool) -> Tensor:
    h = relu(_conv(images, p["stem.w"], p["stem.b"], 2, 1))
    h = relu(_conv(_to_nchw(h), p["down.w"], p["down.b"], 2, 1))
    for i in range(config.depth - 2):
        branch = relu(_conv(_to_nchw(h), p[f"res{i}.w"], p[f"res{i}.b"], 1, 1))
        if train and rates.dropout > 0:
            branch = _dropout(branch, rates.dropout, rates.stream, layer=i)
        if train and rates.drop_path > 0:
            branch = _drop_path(branch, rates.drop_path, rates.stream, layer=i)
        h = add(h, branch)
    return h  # (B, gh, gw, D)


def _attention(config, p, prefix: str, x: Tensor) -> Tensor:
    b, n, d = x.data.shape
    heads = config.heads
    dh = d // heads

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split_heads(add(matmul(x, p[prefix + "wq"]), p[prefix + "bq"]))
    k = split_heads(add(matmul(x, p[prefix + "wk"]), p[prefix + "bk"]))
    v = split_heads(add(matmul(x, p[prefix + "wv"]), p[prefix + "bv"]))
    att = softmax(mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)), axis=-1)
    o = transpose(matmul(att, v), (0, 2, 1, 3))
    o = reshape(o, (b, n, d))
    return add(matmul(o, p[prefix + "proj.w"]), p[prefix + "proj.b"])


def _forward_transformer(config, p, images, rates, train: bool) -> Tensor:
    b = images.data.shape[0]
    patches = extract_patches(images, config.patch_size, config.patch_size, 0)
    tokens = reshape(patches, (b, config.tokens, -1))
    h = add(add(matmul(tokens, p["embed.w"]), p["embed.b"]), p["pos"])
    for i in range(config.depth):
        prefix = f"blk{i}."
        a = _attention(config, p, prefix, _layernorm(h, p[prefix + "ln1.g"], p[prefix + "ln1.b"]))
        if train and rates.dropout > 0:
            a = _dropout(a, rates.dropout, rates.stream, layer=4 * i + 1)
        if train and rates.drop_path > 0:
            a = _drop_path(a, rates.drop_path, rates.stream, layer=4 * i)
        h = add(h, a)
        m = _layernorm(h, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
        m = add(matmul(gelu(add(matmul(m, p[prefix + "fc1.w"]), p[prefix + "fc1.b"])), p[prefix + "fc2.w"]), p[prefix + "fc2.b"])
        if train and rates.dropout > 0:
            m = _dropout(m, rates.dropout, rates.stream, layer=4 * i + 3)
        if train and rates.drop_path > 0:
            m = _drop_path(m, rates.drop_path, rates.stream, layer=4 * i + 2)
        h = add(h, m)
    # no norm on the output: per-token magnitudes carry the localization
    # signal that the classifier projection reads out
    gh, gw = config.feature_grid
    return reshape(h, (b, gh, gw, config.feature_dim))


def forward_features_batch(
    config: BackboneConfig,
    params: dict,
    images,
    rates: AdjustmentRates = ZERO_RATES,
    mode: str = "train",
) -> Tensor:
    """Map a batch of images (B,3,H,W) to features (B, gh, gw, D).

    Eval mode forces both adjustment rates to zero and is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    images = images if isinstance(images, Tensor) else Tensor(images)
    expected = (images.data.shape[0],) + tuple(config.input_size)
    if images.data.shape != expected:
        raise ValueError(f"images shape {images.data.shape} != {expected}")
    train = mode == "train"
    p = _lift_params(params)
    if config.kind == "conv":
        return _forward_conv(config, p, images, rates, train)
    return _forward_transformer(config, p, images, rates, train)


def forward_features(
    config: BackboneConfig,
    params: dict,
    image,
    rates: AdjustmentRates = ZERO_RATES,
    mode: str = "train",
) -> Tensor:
    """Single-image forward: (3,H,W) -> (gh, gw, D)."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    out = forward_features_batch(config, params, reshape(image, (1,) + image.data.shape), rates, mode)
    return reshape(out, out.data.shape[1:])


def receptive_field_bounds(config: BackboneConfig, i: int, j: int) -> tuple[int, int, int, int]:
    """Inclusive input-pixel bounds (r0, r1, c0, c1) feeding conv feature (i, j)."""
    if config.kind != "conv":
        raise ValueError("receptive field bounds are defined for the conv backbone")
    lo_r, hi_r = i, i
    lo_c, hi_c = j, j
    for k, s, pad in reversed(conv_layer_specs(config)):
        lo_r = lo_r * s - pad
        hi_r = hi_r * s - pad + k - 1
        lo_c = lo_c * s - pad
        hi_c = hi_c * s - pad + k - 1
    h, w = config.input_size[1], config.input_size[2]
    return max(lo_r, 0), min(hi_r, h - 1), max(lo_c, 0), min(hi_c, w - 1)
