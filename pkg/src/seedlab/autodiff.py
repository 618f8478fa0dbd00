"""Reverse-mode automatic differentiation over dense float64 tensors.

Every forward op validates that its output is finite and records a
vector-Jacobian closure on a tape; `backward` replays the tape in reverse
topological order. Gradients are checked against central finite differences
by `finite_difference_check`.
"""

from __future__ import annotations

import ctypes

import numpy as np

# Large tensors churn through glibc's mmap allocator (fresh zeroed pages per
# temporary) unless the threshold is raised; ~4x end-to-end on typical hosts.
try:
    _libc = ctypes.CDLL("libc.so.6")
    _libc.mallopt(-3, 256 * 1024 * 1024)  # M_MMAP_THRESHOLD
    _libc.mallopt(-1, 256 * 1024 * 1024)  # M_TRIM_THRESHOLD
except (OSError, AttributeError):  # non-glibc platform
    pass

__all__ = [
    "Tensor",
    "NonFiniteError",
    "DifferentiableFunction",
    "no_grad",
    "value_and_grad",
    "finite_difference_check",
    "FiniteDifferenceReport",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "exp",
    "log",
    "power",
    "clip_min",
    "relu",
    "sigmoid",
    "softplus",
    "tanh",
    "softmax",
    "gelu",
    "layernorm",
    "tsum",
    "tmean",
    "tmax",
    "reshape",
    "transpose",
    "concat",
    "slice_last",
    "extract_patches",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf, diagnosing the offending op."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager suspending tape recording (forward values only)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


class Tensor:
    """Immutable dense array node in the computation graph.

    `data` is always a float64 ndarray. `grad` is populated by `backward`
    and holds dL/dself with the same shape as `data`.
    """

    __slots__ = ("data", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, parents=(), vjp=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        self._op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r})"

    # Operator sugar; every method defers to the module-level op functions.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        """Accumulate gradients of self (seeded with ones) into the graph."""
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None:
                    continue
                # accumulation reallocates, so views returned by vjps are safe
                parent.grad = g if parent.grad is None else parent.grad + g


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents, vjp, op: str) -> Tensor:
    # min/max are NaN- and Inf-propagating, so two reductions prove finiteness
    if data.size and not (
        np.isfinite(data.min(initial=0.0)) and np.isfinite(data.max(initial=0.0))
    ):
        raise NonFiniteError(op)
    if not _GRAD_ENABLED[0]:
        return Tensor(data)
    return Tensor(data, parents=parents, vjp=vjp, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
        "div",
    )


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def power(a, p: float, floor: float | None = None) -> Tensor:
    """Elementwise a**p with a real exponent.

    With `floor` set, the base is clamped to max(a, floor) before the power;
    clamped entries receive zero gradient. Used for distribution sharpening
    where entries may underflow toward 0.
    """
    a = _lift(a)
    p = float(p)
    if floor is not None:
        base = np.maximum(a.data, floor)
        mask = (a.data > floor).astype(np.float64)
    else:
        base = a.data
        mask = None
    out = base**p
    dbase = p * base ** (p - 1.0)
    if mask is not None:
        dbase = dbase * mask
    return _node(out, (a,), lambda g: (g * dbase,), "power")


def clip_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    a = _lift(a)
    out = np.maximum(a.data, lo)
    mask = (a.data > lo).astype(np.float64)
    return _node(out, (a,), lambda g: (g * mask,), "clip_min")


def relu(a) -> Tensor:
    a = _lift(a)
    out = np.maximum(a.data, 0.0)
    mask = (a.data > 0.0).astype(np.float64)
    return _node(out, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(a)) in the overflow-safe max(a,0)+log1p(exp(-|a|)) form."""
    a = _lift(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = np.empty_like(a.data)
    pos = a.data >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    sig[~pos] = ez / (1.0 + ez)
    return _node(out, (a,), lambda g: (g * sig,), "softplus")


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_K = 0.044715


def gelu(a) -> Tensor:
    """Tanh-form Gaussian error linear unit (single fused node)."""
    a = _lift(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_K * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x2)
        return (g * dydx,)

    return _node(out, (a,), vjp, "gelu")


def layernorm(a, gain, offset, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift (single fused node)."""
    a, gain, offset = _lift(a), _lift(gain), _lift(offset)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + offset.data
    reduce_axes = tuple(range(x.ndim - 1))

    def vjp(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        dgain = np.sum(g * xhat, axis=reduce_axes)
        doffset = np.sum(g, axis=reduce_axes)
        return dx, dgain, doffset

    return _node(out, (a, gain, offset), vjp, "layernorm")


def softmax(a, axis: int = -1) -> Tensor:
    """Stabilized softmax along `axis` (max-subtracted before exponentiation)."""
    a = _lift(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, (a,), vjp, "softmax")


# ---------------------------------------------------------------------------
# contractions and reductions


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if ga.shape != a.data.shape:
            ga = _unbroadcast(ga, a.data.shape)
        if b.data.ndim == 2 and a.data.ndim > 2:
            # batched @ 2-D weight: fold batch dims into one GEMM
            cols = a.data.shape[-1]
            gb = a.data.reshape(-1, cols).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if gb.shape != b.data.shape:
                gb = _unbroadcast(gb, b.data.shape)
        return ga, gb

    return _node(out, (a, b), vjp, "matmul")


def _reduction_grad_shape(shape, axis):
    if axis is None:
        return tuple(1 for _ in shape), tuple(range(len(shape)))
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    kept = tuple(1 if i in axes else d for i, d in enumerate(shape))
    return kept, axes


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    kept, _ = _reduction_grad_shape(a.data.shape, axis)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = g.reshape(kept)
        return (np.broadcast_to(g, a.data.shape),)

    return _node(out, (a,), vjp, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    kept, axes = _reduction_grad_shape(a.data.shape, axis)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = g.reshape(kept)
        return (np.broadcast_to(g / count, a.data.shape),)

    return _node(out, (a,), vjp, "mean")


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties send the gradient to the first maximum only."""
    a = _lift(a)
    if axis is not None and not isinstance(axis, int):
        raise ValueError("tmax supports axis=None or a single int axis")
    out = np.max(a.data, axis=axis, keepdims=keepdims)
    kept, _ = _reduction_grad_shape(a.data.shape, axis)
    mask = np.zeros_like(a.data)
    if axis is None:
        mask.reshape(-1)[np.argmax(a.data)] = 1.0
    else:
        idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        np.put_along_axis(mask, idx, 1.0, axis=axis)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = g.reshape(kept)
        return (mask * g,)

    return _node(out, (a,), vjp, "max")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def slice_last(a, count: int) -> Tensor:
    """First `count` entries along the last axis; adjoint zero-pads the rest."""
    a = _lift(a)
    out = a.data[..., :count]
    pad_width = a.data.shape[-1] - count

    def vjp(g):
        pad = [(0, 0)] * (g.ndim - 1) + [(0, pad_width)]
        return (np.pad(g, pad),)

    return _node(out, (a,), vjp, "slice_last")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), vjp, "concat")


def extract_patches(a, size: int, stride: int, pad: int = 0) -> Tensor:
    """im2col for NCHW input: (B,C,H,W) -> (B,H',W',C*size*size).

    The adjoint scatter-adds patch gradients back into the padded image,
    so convolution is just extract_patches followed by matmul.
    """
    a = _lift(a)
    b, c, h, w = a.data.shape
    x = a.data
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - size) // stride + 1
    wo = (wp - size) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (size, size), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B,C,H',W',size,size)
    out = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b, ho, wo, c * size * size
    )

    def vjp(g):
        g6 = g.reshape(b, ho, wo, c, size, size).transpose(0, 3, 1, 2, 4, 5)
        gx = np.zeros((b, c, hp, wp))
        for di in range(size):
            for dj in range(size):
                gx[:, :, di : di + ho * stride : stride, dj : dj + wo * stride : stride] += g6[
                    :, :, :, :, di, dj
                ]
        if pad:
            gx = gx[:, :, pad : pad + h, pad : pad + w]
        return (gx,)

    return _node(out, (a,), vjp, "extract_patches")


# ---------------------------------------------------------------------------
# function wrapper and gradient checking


class DifferentiableFunction:
    """A forward callable over Tensors bundled with named parameters."""

    def __init__(self, forward, parameters: dict | None = None):
        self.forward = forward
        self.parameters = dict(parameters or {})

    def __call__(self, *inputs: Tensor) -> Tensor:
        return self.forward(*inputs)


def value_and_grad(f, inputs) -> tuple[Tensor, list[np.ndarray]]:
    """Evaluate f on `inputs` and return (output, per-input gradients).

    Non-scalar outputs are seeded with ones, i.e. gradients are of the
    output sum. Input gradients always match the input shapes.
    """
    wrapped = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    out = f(*wrapped)
    out.backward()
    grads = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrapped
    ]
    return out, grads


class FiniteDifferenceReport:
    """Per-entry comparison of analytic gradients against central differences."""

    def __init__(self):
        self.entries: list[dict] = []
        self.failures: list[dict] = []
        self.non_differentiable: list[dict] = []

    @property
    def max_rel_error(self) -> float:
        errs = [e["rel_error"] for e in self.entries]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        return (
            f"{len(self.entries)} entries checked, max rel error "
            f"{self.max_rel_error:.3e}, {len(self.failures)} failures, "
            f"{len(self.non_differentiable)} non-differentiable points"
        )


def finite_difference_check(
    f,
    inputs,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries_per_input: int | None = None,
    rng: np.random.Generator | None = None,
    min_gradient_magnitude: float = 0.0,
) -> FiniteDifferenceReport:
    """Check analytic gradients of scalar-valued f by central differences.

    Relative error per entry is |analytic - central| / max(|analytic|,
    |central|, 1e-8). Entries where the one-sided slopes disagree (a kink,
    e.g. a tied max) are reported as non-differentiable instead of failing.
    `max_entries_per_input` subsamples entries for expensive functions.
    `min_gradient_magnitude` restricts probing to entries with analytic
    gradient above it: below central-difference roundoff the comparison
    carries no signal either way.
    """
    if epsilon <= 0 or epsilon > 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    if not inputs or any(x.size == 0 for x in inputs):
        raise ValueError("finite_difference_check requires nonempty inputs")

    out, grads = value_and_grad(f, inputs)
    if out.size != 1:
        raise ValueError("finite_difference_check requires a scalar-valued f")
    base = float(out.data)

    def eval_at(arrs) -> float:
        with no_grad():
            return float(f(*[Tensor(a) for a in arrs]).data)

    report = FiniteDifferenceReport()
    for idx, x in enumerate(inputs):
        flat_indices = np.arange(x.size)
        if min_gradient_magnitude > 0.0:
            eligible = np.flatnonzero(
                np.abs(grads[idx].reshape(-1)) >= min_gradient_magnitude
            )
            if eligible.size == 0:
                continue
            flat_indices = eligible
        if max_entries_per_input is not None and flat_indices.size > max_entries_per_input:
            gen = rng if rng is not None else np.random.default_rng(0)
            flat_indices = gen.choice(flat_indices, size=max_entries_per_input, replace=False)
        for k in flat_indices:
            perturbed = [a.copy() for a in inputs]
            flat = perturbed[idx].reshape(-1)
            orig = flat[k]
            flat[k] = orig + epsilon
            f_plus = eval_at(perturbed)
            flat[k] = orig - epsilon
            f_minus = eval_at(perturbed)
            central = (f_plus - f_minus) / (2.0 * epsilon)
            analytic = float(grads[idx].reshape(-1)[k])
            rel = abs(analytic - central) / max(abs(analytic), abs(central), 1e-8)
            entry = {
                "input": idx,
                "index": int(k),
                "analytic": analytic,
                "central": central,
                "rel_error": rel,
            }
            if rel > tolerance:
                fwd = (f_plus - base) / epsilon
                bwd = (base - f_minus) / epsilon
                slope_gap = abs(fwd - bwd) / max(abs(fwd), abs(bwd), 1e-8)
                if slope_gap > 0.1:
                    entry["flag"] = "non-differentiable point"
                    report.non_differentiable.append(entry)
                else:
                    report.failures.append(entry)
            report.entries.append(entry)
    return report
