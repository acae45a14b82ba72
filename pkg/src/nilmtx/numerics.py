"""Minimal reverse-mode tensor core backed by numpy float64 arrays.

Every differentiable op builds its output eagerly and attaches a
:class:`GradRecord` holding the inputs and a backward closure.  Calling
:func:`backward` on a scalar replays the records reachable from it in reverse
creation order.  Leaf tensors created with ``requires_grad=True`` accumulate
into ``.grad``; intermediate gradients are transient.

Ops accept leading batch axes wherever that is natural (``matmul``,
``softmax_rows``, ``layer_norm``, ``conv1d`` ...), so a whole minibatch of
windows goes through one call.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, EvaluationError, GeometryError

DTYPE = np.float64

_record_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable record creation inside the block (evaluation fast path)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@dataclass
class GradRecord:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    index: int = field(default_factory=lambda: next(_record_counter))


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "record", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.record: GradRecord | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar for the handful of ops used in model code
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(inputs: Iterable[Tensor]) -> bool:
    return _grad_enabled and any(t.requires_grad or t.record is not None for t in inputs)


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out.record = GradRecord(op, inputs, backward) if _needs_grad(inputs) else None
    return out


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Propagate d(root) into every reachable leaf's ``.grad`` (additively)."""
    if grad is None:
        if root.data.size != 1:
            raise DimensionError(f"backward needs a scalar root or explicit grad, got {root.shape}")
        grad = np.ones_like(root.data)
    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.record is None or id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(t.record.inputs)

    pending: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=DTYPE)}
    if root.record is None and root.requires_grad:
        _accumulate_leaf(root, pending.pop(id(root)))
        return
    for t in sorted(nodes.values(), key=lambda n: n.record.index, reverse=True):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        rec = t.record
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None:
                continue
            if inp.record is not None:
                key = id(inp)
                pending[key] = pending[key] + gi if key in pending else gi
            elif inp.requires_grad:
                _accumulate_leaf(inp, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.broadcast_to(g, t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- RNG


class RngStream:
    """Counter-based random stream (Philox) keyed by a 64-bit seed.

    Each draw call consumes one counter value, so the sequence depends only on
    ``seed`` and the order of calls, never on platform or array sizes of
    earlier draws.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def _generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=self.seed, counter=[0, 0, 0, self.counter])
        self.counter += 1
        return np.random.Generator(bitgen)

    def uniform(self, shape) -> np.ndarray:
        return self._generator().random(shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._generator().normal(0.0, scale, shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._generator().integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def spawn(self, index: int) -> "RngStream":
        return RngStream(self.seed ^ (int(index) * 0x9E3779B97F4A7C15 & 0xFFFFFFFFFFFFFFFF))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, "scale", (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    return _make(np.array(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, x.shape),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) with constant weights; used as a generic scalar probe."""
    w = np.asarray(weights, dtype=DTYPE)
    return _make(np.array((x.data * w).sum()), "wsum", (x,), lambda g: (g * w,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), "clamp", (x,), lambda g: (g * inside,))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _make(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inverse),))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(x.data[index], "slice", (x,), bw)


def replace_where(x: Tensor, mask: np.ndarray, value: Tensor) -> Tensor:
    """Positions where ``mask`` (broadcast over the last axis) is set take ``value``."""
    m = np.asarray(mask, dtype=bool)[..., None]
    out = np.where(m, value.data, x.data)

    def bw(g):
        return g * ~m, _unbroadcast(g * m, value.shape)

    return _make(out, "replace_where", (x, value), bw)


# ---------------------------------------------------------------- linear algebra


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with numpy batch broadcasting."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ _swap_last(b.data)
        gb = _swap_last(a.data) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b for x[..., d_in], w[d_in, d_out]; fused to keep the graph small."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _make(out, "linear", inputs, bw)


# ---------------------------------------------------------------- normalisation


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _softmax_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def softmax_rows(x: Tensor) -> Tensor:
    y = _softmax(x.data)
    return _make(y, "softmax", (x,), lambda g: (_softmax_backward(y, g),))


def _layer_norm_backward(xhat, inv_std, gamma, g):
    gx_hat = g * gamma
    d = xhat.shape[-1]
    gx = (
        inv_std
        / d
        * (d * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
    )
    flat_g = g.reshape(-1, d)
    ggamma = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
    gbeta = flat_g.sum(axis=0)
    return gx, ggamma, gbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        return _layer_norm_backward(xhat, inv_std, gamma.data, g)

    return _make(out, "layer_norm", (x, gamma, beta), bw)


# ---------------------------------------------------------------- convolutions


def _padding(mode, k: int) -> tuple[int, int]:
    if mode == "same":
        left = (k - 1) // 2
        return left, k - 1 - left
    if mode in ("valid", None, 0):
        return 0, 0
    if isinstance(mode, int) and mode > 0:
        return mode, mode
    if isinstance(mode, tuple) and len(mode) == 2:
        return int(mode[0]), int(mode[1])
    raise ConfigError(f"unknown padding mode {mode!r}")


def _conv1d_backward(xp_shape, pad, cols, w, g, stride):
    # g: (..., L', c_out); cols: (..., L', k, c_in)
    k, c_in, c_out = w.shape
    n_out = g.shape[-2]
    flat_cols = cols.reshape(-1, n_out, k, c_in)
    gw = np.einsum("btkc,bto->kco", flat_cols, g.reshape(-1, n_out, c_out))
    gcols = np.einsum("...to,kco->...tkc", g, w)
    gxp = np.zeros(xp_shape, dtype=DTYPE)
    for j in range(k):
        gxp[..., j : j + stride * (n_out - 1) + 1 : stride, :] += gcols[..., :, j, :]
    left, right = pad
    gx = gxp[..., left : xp_shape[-2] - right, :]
    gb = g.reshape(-1, c_out).sum(axis=0)
    return gx, gw, gb


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, padding="same", stride: int = 1) -> Tensor:
    """Cross-correlation along the time axis.

    ``x`` is ``[..., L, c_in]`` and ``w`` is ``[k, c_in, c_out]``.
    """
    k, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise DimensionError(f"conv1d channel mismatch: input {x.shape}, kernel {w.shape}")
    pad = _padding(padding, k)
    pad_width = [(0, 0)] * (x.data.ndim - 2) + [pad, (0, 0)]
    xp = np.pad(x.data, pad_width)
    if k > xp.shape[-2]:
        raise GeometryError(f"kernel length {k} exceeds padded input length {xp.shape[-2]}")
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-2)[..., ::stride, :, :]
    # sliding_window_view puts the window axis last: (..., L', c_in, k)
    cols = np.swapaxes(cols, -1, -2)
    out = np.einsum("...tkc,kco->...to", cols, w.data)
    if bias is not None:
        out = out + bias.data
    inputs = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gx, gw, gb = _conv1d_backward(xp.shape, pad, cols, w.data, g, stride)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, "conv1d", inputs, bw)


def _deconv1d_backward(x, w, g, stride):
    k = w.shape[0]
    n = x.shape[-2]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    flat_x = x.reshape(-1, n, x.shape[-1])
    for j in range(k):
        gj = g[..., j : j + stride * (n - 1) + 1 : stride, :]
        gx += gj @ w[j].T
        gw[j] = np.einsum("btc,bto->co", flat_x, gj.reshape(-1, n, gj.shape[-1]))
    return gx, gw


def deconv1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution: output length ``(L - 1) * stride + k``.

    Exact adjoint of ``conv1d(., w.transpose(0, 2, 1), padding="valid", stride=stride)``.
    """
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    k, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise DimensionError(f"deconv1d channel mismatch: input {x.shape}, kernel {w.shape}")
    n = x.shape[-2]
    out = np.zeros(x.shape[:-2] + ((n - 1) * stride + k, c_out), dtype=DTYPE)
    for j in range(k):
        out[..., j : j + stride * (n - 1) + 1 : stride, :] += x.data @ w.data[j]

    def bw(g):
        return _deconv1d_backward(x.data, w.data, g, stride)

    return _make(out, "deconv1d", (x, w), bw)


def pool1d(x: Tensor, alpha: int) -> Tensor:
    """Non-overlapping max pooling of width ``alpha`` along the time axis."""
    n = x.shape[-2]
    if alpha < 1 or n % alpha:
        raise GeometryError(f"pool width {alpha} does not divide sequence length {n}")
    blocks = x.data.reshape(x.shape[:-2] + (n // alpha, alpha, x.shape[-1]))
    arg = blocks.argmax(axis=-2)  # first maximum wins ties
    out = np.take_along_axis(blocks, arg[..., None, :], axis=-2)[..., 0, :]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None, :], g[..., None, :], axis=-2)
        return (gb.reshape(x.shape),)

    return _make(out, "pool1d", (x,), bw)


# ---------------------------------------------------------------- stochastic / activations


def dropout(x: Tensor, p: float, rng: RngStream | None, training: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout ratio must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.uniform(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _gelu(x):
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x**2)
    return y, dy


def _tanh(x):
    y = np.tanh(x)
    return y, 1.0 - y**2


def _relu(x):
    return np.maximum(x, 0.0), (x > 0).astype(DTYPE)


ACTIVATIONS = {"tanh": _tanh, "gelu": _gelu, "relu": _relu}


def activation(x: Tensor, kind: str = "tanh") -> Tensor:
    """Elementwise tanh, gelu (tanh approximation) or relu."""
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    y, dy = fn(x.data)
    return _make(y, kind, (x,), lambda g: (g * dy,))


# ---------------------------------------------------------------- gradient check


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` is re-evaluated with each coordinate of each parameter nudged by
    ``+-step``; the parameters are restored afterwards.
    """
    if step <= 0:
        raise ConfigError("finite-difference step must be positive")
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise EvaluationError("objective is not finite at the check point")
    backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                fp = float(f().data)
                flat[i] = orig - step
                fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise EvaluationError(f"objective not finite when perturbing {p.name or p.shape}[{i}]")
            fd = (fp - fm) / (2 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
