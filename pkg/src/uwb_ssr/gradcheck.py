"""Central-difference gradient checking against the tape's analytic gradients."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def _scalar(t) -> float:
    return float(np.asarray(t.data if isinstance(t, Tensor) else t).reshape(()))


def finite_difference_check(f: Callable[[], Tensor], x: Tensor | Sequence[Tensor],
                            step: float = 1e-5, n_samples: Optional[int] = None,
                            rng: Optional[np.random.Generator] = None) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``f`` is a zero-argument closure returning a scalar tensor built from the
    tensors in ``x``; it must be deterministic.  ``x`` entries are perturbed
    in place and restored.  With ``n_samples`` roughly that many coordinates
    are probed: one in every tensor, the rest uniform over all entries.
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    with Tape():
        loss = f()
        backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    for t, flag in zip(tensors, saved):
        t.grad = None
        t.requires_grad = flag

    sizes = np.array([t.data.size for t in tensors])
    total = int(sizes.sum())
    if n_samples is None or n_samples >= total:
        flat = np.arange(total)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        # one coordinate from every tensor, the rest uniform over all entries
        firsts = [off + rng.integers(n) for off, n in zip(np.cumsum(sizes) - sizes, sizes)]
        rest = rng.choice(total, size=max(n_samples - len(firsts), 0), replace=False)
        flat = np.unique(np.concatenate([firsts, rest]).astype(np.int64))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for idx in flat:
        which = int(np.searchsorted(offsets, idx, side="right") - 1)
        t = tensors[which]
        view = t.data.reshape(-1)
        j = idx - offsets[which]
        orig = view[j]
        view[j] = orig + step
        up = _scalar(f())
        view[j] = orig - step
        down = _scalar(f())
        view[j] = orig
        numeric = (up - down) / (2 * step)
        a = analytic[which].reshape(-1)[j]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def model_loss_closure(model, batch, alpha: float = 0.15, dropout_seed: int = 0):
    """Deterministic training-mode loss of ``model`` on ``batch``.

    Dropout masks are redrawn from the same seed on every call so repeated
    evaluations differ only through the perturbed inputs.
    """
    from .training import label_smoothed_ce

    def f():
        rng = np.random.default_rng(dropout_seed)
        logits = model.forward(batch.inputs, batch.mask, training=True, rng=rng)
        return label_smoothed_ce(logits, batch.labels, alpha)

    return f


def primitive_suite(seed: int = 0) -> dict[str, float]:
    """Finite-difference error of every differentiable primitive on small random inputs."""
    from . import tensor as T
    from .tensor import BatchNormStats, TemporalMask

    rng = np.random.default_rng(seed)

    def r(*shape):
        return Tensor(rng.normal(size=shape))

    mask = TemporalMask([7, 5, 3], 7)
    x3, w3, b3 = r(3, 4, 7), r(5, 4, 3), r(5)
    g5 = r(3, 5, 7)
    xl, wl, bl, gl = r(2, 3, 4), r(5, 4), r(5), r(2, 3, 5)
    ma, mb, gm = r(2, 3, 4), r(2, 4, 2), r(2, 3, 2)
    s, h = r(4), r(4)
    xb, gb = r(3, 4, 7), r(3, 4, 7)
    eval_stats = BatchNormStats(rng.normal(size=4), rng.uniform(0.5, 2.0, 4))
    xa, ga = r(3, 5), r(3, 5)
    keys = rng.random((3, 5)) > 0.3
    keys[:, 0] = True
    gp = r(3, 4)

    cases = {
        "conv1d": (lambda: T.sum(T.conv1d(x3, w3, b3, dilation=2) * g5), [x3, w3, b3]),
        "linear": (lambda: T.sum(T.linear(xl, wl, bl) * gl), [xl, wl, bl]),
        "matmul": (lambda: T.sum((ma @ mb) * gm), [ma, mb]),
        "batch_norm1d/train": (lambda: T.sum(T.batch_norm1d(xb, s, h, BatchNormStats.create(4), True, mask)
                                             * gb), [xb, s, h]),
        "batch_norm1d/eval": (lambda: T.sum(T.batch_norm1d(xb, s, h, eval_stats, False) * gb), [xb, s, h]),
        "relu": (lambda: T.sum(T.relu(xa) * ga), [xa]),
        "sigmoid": (lambda: T.sum(T.sigmoid(xa) * ga), [xa]),
        "softmax": (lambda: T.sum(T.softmax(xa, axis=1, mask=keys) * ga), [xa]),
        "log_softmax": (lambda: T.sum(T.log_softmax(xa, axis=0) * ga), [xa]),
        "dropout": (lambda: T.sum(T.dropout(xa, 0.25, True, np.random.default_rng(1)) * ga), [xa]),
        "masked_global_avg_pool": (lambda: T.sum(T.masked_global_avg_pool(xb, mask) * gp), [xb]),
    }
    return {name: finite_difference_check(f, xs) for name, (f, xs) in cases.items()}


def full_model_check(n_coords: int = 1000, seed: int = 0, model_config=None,
                     lengths=(16, 12, 9)) -> float:
    """Gradient check of the label-smoothed loss through a freshly initialized model.

    Attention gates are set away from their zero init so the attention
    projections carry gradient.
    """
    from .data import collate
    from .model import AttentionTCN, ModelConfig

    cfg = model_config or ModelConfig()
    rng = np.random.default_rng(seed)
    model = AttentionTCN(cfg, seed=rng)
    for name, p in model.params.items():
        if name.endswith("attn.gamma"):
            p.data[:] = rng.uniform(0.3, 0.8)
    frames = [rng.normal(size=(m, cfg.in_channels)) for m in lengths]
    labels = rng.integers(0, cfg.n_classes, size=len(lengths))
    batch = collate(frames, labels)
    return finite_difference_check(model_loss_closure(model, batch), model.parameters(),
                                   n_samples=n_coords, rng=rng)
