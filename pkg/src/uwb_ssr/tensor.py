"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the tape that is active in the current
thread (see :class:`Tape`).  Outside a tape nothing is recorded, which is
what inference paths rely on to stay cheap.

Batched sequence tensors are laid out ``B x C x M`` (batch, channels, time).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "TemporalMask", "BatchNormStats",
    "add", "sub", "mul", "neg", "matmul", "transpose", "reshape",
    "sum", "mean", "conv1d", "linear", "batch_norm1d", "relu",
    "sigmoid", "softmax", "log_softmax", "dropout",
    "masked_global_avg_pool", "backward", "no_grad_active",
]

_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def no_grad_active() -> bool:
    return _active_tape() is None


class Tensor:
    """A float64 array that can take part in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[int] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"expected a single-element tensor, got shape {t.shape}")


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; operations executed inside the ``with`` block
    whose inputs require gradients are appended in execution order, which is
    a topological order of the forward graph.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple, grad_fn) -> None:
        out._node = len(self.nodes)
        out._tape = self
        out.requires_grad = True
        self.nodes.append(_Node(out, inputs, grad_fn))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple, grad_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every grad-requiring leaf.

    The tape is consumed: its nodes and saved activations are released.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss is not attached to a tape; compute it inside `with Tape():`")
    tape = loss._tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss._node + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
    for node in tape.nodes:
        node.out._tape = None
        node.out._node = None
    tape.nodes.clear()


# -- elementwise and structural ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
        _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
    ))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(Tensor(-a.data), (a,), lambda g: (-g,))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``... x P x Q  @  ... x Q x R``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map along the trailing axis; ``weight`` is ``G x F``."""
    if weight.ndim != 2:
        raise ValueError(f"linear weight must be 2-D, got {weight.shape}")
    feat = weight.shape[1]
    if x.shape[-1] != feat:
        raise ValueError(f"linear expects trailing extent {feat}, got input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, feat)
    y = x2 @ weight.data.T
    if bias is not None:
        y += bias.data
    out = Tensor(y.reshape(lead + (weight.shape[0],)))

    def grad_fn(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, grad_fn)


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           dilation: int = 1, padding: Optional[int] = None) -> Tensor:
    """Zero-padded dilated 1-D cross-correlation.

    ``x`` is ``C_in x M`` or ``B x C_in x M``; ``weight`` is ``C_out x C_in x K``.
    ``padding`` defaults to ``dilation * (K - 1) // 2`` which keeps the
    temporal extent for odd ``K``.
    """
    if weight.ndim != 3:
        raise ValueError(f"conv1d weight must be C_out x C_in x K, got {weight.shape}")
    c_out, c_in, k = weight.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d kernel size must be odd, got K={k}")
    if dilation < 1:
        raise ValueError(f"dilation must be a positive int, got {dilation}")
    if padding is None:
        padding = dilation * (k - 1) // 2
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    unbatched = x.ndim == 2
    if x.ndim not in (2, 3):
        raise ValueError(f"conv1d input must be C x M or B x C x M, got {x.shape}")
    xd = x.data[None] if unbatched else x.data
    b, c, m = xd.shape
    if c != c_in:
        raise ValueError(f"conv1d input has {c} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv1d bias shape {bias.shape} != ({c_out},)")
    span = dilation * (k - 1)
    m_out = m + 2 * padding - span
    if m_out < 1:
        raise ValueError(f"conv1d output would be empty (M={m}, K={k}, dilation={dilation})")

    # channels-last im2col: one GEMM per call
    xp = np.zeros((b, m + 2 * padding, c))
    xp[:, padding:padding + m, :] = xd.transpose(0, 2, 1)
    cols = np.concatenate([xp[:, j * dilation:j * dilation + m_out, :] for j in range(k)], axis=2)
    cols = cols.reshape(b * m_out, k * c)
    w2 = weight.data.transpose(0, 2, 1).reshape(c_out, k * c)
    y = cols @ w2.T
    if bias is not None:
        y += bias.data
    y = y.reshape(b, m_out, c_out).transpose(0, 2, 1)
    out = Tensor(y[0] if unbatched else y)

    def grad_fn(g):
        g2 = (g[None] if unbatched else g).transpose(0, 2, 1).reshape(b * m_out, c_out)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(b, m_out, k, c)
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, j * dilation:j * dilation + m_out, :] += dcols[:, :, j, :]
            gx = dxp[:, padding:padding + m, :].transpose(0, 2, 1)
            gx = gx[0] if unbatched else gx
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(c_out, k, c).transpose(0, 2, 1)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, grad_fn)


# -- masking, normalization, pooling -------------------------------------------

@dataclass(frozen=True)
class TemporalMask:
    """Valid prefix length of each batch element along the time axis."""

    valid_len: np.ndarray
    max_len: int

    def __post_init__(self):
        vl = np.asarray(self.valid_len, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "valid_len", vl)
        if vl.size == 0:
            raise ValueError("TemporalMask needs at least one batch element")
        if vl.min() < 1 or vl.max() > self.max_len:
            raise ValueError(f"valid lengths must lie in [1, {self.max_len}], got {vl.tolist()}")

    @classmethod
    def full(cls, batch: int, length: int) -> "TemporalMask":
        return cls(np.full(batch, length), length)

    @property
    def batch(self) -> int:
        return self.valid_len.size

    def bool(self) -> np.ndarray:
        """``B x M`` boolean array, True on valid steps."""
        return np.arange(self.max_len)[None, :] < self.valid_len[:, None]

    def weights(self) -> np.ndarray:
        """``B x 1 x M`` float array of ones on valid steps, for broadcasting."""
        return self.bool()[:, None, :].astype(np.float64)


def _check_mask(mask: TemporalMask, x: Tensor) -> None:
    if mask.batch != x.shape[0] or mask.max_len != x.shape[-1]:
        raise ValueError(f"mask ({mask.batch} x {mask.max_len}) does not fit input {x.shape}")


@dataclass
class BatchNormStats:
    """Running statistics of one batch-norm layer (not learnable)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormStats":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)

    def copy(self) -> "BatchNormStats":
        return BatchNormStats(self.mean.copy(), self.var.copy(), self.momentum, self.eps)


def batch_norm1d(x: Tensor, scale: Tensor, shift: Tensor, stats: BatchNormStats,
                 training: bool, mask: Optional[TemporalMask] = None) -> Tensor:
    """Per-channel batch normalization of ``B x C x M`` or ``B x C`` input.

    In training mode the statistics come from the batch, restricted to valid
    time steps when ``mask`` is given, and ``stats`` is updated in place.
    """
    two_d = x.ndim == 2
    if x.ndim not in (2, 3):
        raise ValueError(f"batch_norm1d input must be B x C or B x C x M, got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"scale/shift must have shape ({c},)")
    xd = x.data[:, :, None] if two_d else x.data
    s = scale.data[None, :, None]
    eps = stats.eps

    if not training:
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (xd - stats.mean[None, :, None]) * inv[None, :, None]
        y = xhat * s + shift.data[None, :, None]
        out = Tensor(y[:, :, 0] if two_d else y)

        def grad_eval(g):
            g3 = g[:, :, None] if two_d else g
            gx = g3 * (s * inv[None, :, None]) if x.requires_grad else None
            if gx is not None and two_d:
                gx = gx[:, :, 0]
            return gx, (g3 * xhat).sum(axis=(0, 2)), g3.sum(axis=(0, 2))

        return _record(out, (x, scale, shift), grad_eval)

    if mask is None:
        w = np.ones((xd.shape[0], 1, xd.shape[2]))
    else:
        if two_d:
            raise ValueError("a temporal mask needs B x C x M input")
        _check_mask(mask, x)
        w = mask.weights()
    valid = w.astype(bool)
    n = float(w.sum())
    if n < 1:
        raise ValueError("batch_norm1d has zero valid elements")
    xv = np.where(valid, xd, 0.0)
    mu = xv.sum(axis=(0, 2)) / n
    centered = xd - mu[None, :, None]
    var = np.where(valid, centered, 0.0)
    var = (var * var).sum(axis=(0, 2)) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[None, :, None]
    y = xhat * s + shift.data[None, :, None]
    out = Tensor(y[:, :, 0] if two_d else y)

    m = stats.momentum
    unbiased = var * n / (n - 1) if n > 1 else var
    stats.mean = (1 - m) * stats.mean + m * mu
    stats.var = (1 - m) * stats.var + m * unbiased

    def grad_train(g):
        g3 = g[:, :, None] if two_d else g
        gx = None
        if x.requires_grad:
            gs = g3 * s
            big_g = gs.sum(axis=(0, 2))
            big_h = (gs * centered).sum(axis=(0, 2))
            r = inv[None, :, None]
            gx = r * gs - (w / n) * (r * big_g[None, :, None]
                                     + r ** 3 * big_h[None, :, None] * centered)
            if two_d:
                gx = gx[:, :, 0]
        return gx, (g3 * xhat).sum(axis=(0, 2)), g3.sum(axis=(0, 2))

    return _record(out, (x, scale, shift), grad_train)


def masked_global_avg_pool(x: Tensor, mask: Optional[TemporalMask] = None) -> Tensor:
    """Mean over valid time steps of ``B x C x M`` input, giving ``B x C``."""
    if x.ndim != 3:
        raise ValueError(f"pooling input must be B x C x M, got {x.shape}")
    if mask is None:
        mask = TemporalMask.full(x.shape[0], x.shape[2])
    _check_mask(mask, x)
    w = mask.weights()
    n = mask.valid_len.astype(np.float64)[:, None]
    out = Tensor(np.where(w.astype(bool), x.data, 0.0).sum(axis=2) / n)
    return _record(out, (x,), lambda g: ((g / n)[:, :, None] * w,))


# -- activations ---------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record(Tensor(np.where(pos, x.data, 0.0)), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(Tensor(y), (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-stabilized softmax; entries where ``mask`` is False get weight 0."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(Tensor(y), (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _record(Tensor(y), (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def dropout(x: Tensor, rate: float, training: bool,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(Tensor(x.data * keep), (x,), lambda g: (g * keep,))
