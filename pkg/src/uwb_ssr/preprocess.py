"""Light preprocessing of IR-UWB frame sets.

A raw capture is an ``M x N`` matrix (slow-time x fast-time).  Three steps
turn it into the ``M x 100`` network input: exponential-moving-average
clutter removal, fast-time cropping, and per-frame DC removal.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

N_FAST = 256
N_SELECTED = 100


@dataclass
class RawFrameSet:
    frames: np.ndarray
    frame_rate_hz: float = 100.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ValueError(f"frame set must be a non-empty M x N matrix, got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_fast(self) -> int:
        return self.frames.shape[1]


@dataclass
class ClutterConfig:
    alpha: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"clutter alpha must be in [0, 1), got {self.alpha}")


@dataclass
class PreprocFrameSet:
    """Network-ready ``M x 100`` frames plus the labels they came with."""

    frames: np.ndarray
    word: Optional[int] = None
    session: Optional[str] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def remove_clutter(raw: RawFrameSet | np.ndarray, cfg: ClutterConfig | None = None) -> np.ndarray:
    """Subtract an exponential-moving-average background estimate.

    ``c_t = alpha * c_{t-1} + (1 - alpha) * x_t`` with ``c_0 = x_0``; the
    output is ``x_t - c_t``.  State is reset per frame set.
    """
    cfg = cfg or ClutterConfig()
    x = raw.frames if isinstance(raw, RawFrameSet) else np.asarray(raw, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected an M x N matrix with M >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("frame set contains non-finite amplitudes")
    a = cfg.alpha
    out = np.empty_like(x)
    c = x[0].copy()
    out[0] = 0.0
    # written so static bins and alpha = 0 give exactly zero in floating point
    for t in range(1, x.shape[0]):
        c = x[t] - a * (x[t] - c)
        out[t] = x[t] - c
    return out


def crop_fast_time(frames: RawFrameSet | np.ndarray, lo: int = 1, hi: int = N_SELECTED) -> np.ndarray:
    """Keep fast-time bins ``lo..hi`` (1-based, inclusive)."""
    x = frames.frames if isinstance(frames, RawFrameSet) else np.asarray(frames)
    n = x.shape[1]
    if not 1 <= lo <= hi <= n:
        raise ValueError(f"fast-time range {lo}..{hi} outside 1..{n}")
    return x[:, lo - 1:hi].copy()


def remove_dc(frames: np.ndarray) -> np.ndarray:
    """Subtract each frame's (row's) mean."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"expected an M x F matrix with F >= 1, got {x.shape}")
    return x - x.mean(axis=1, keepdims=True)


def preprocess(raw: RawFrameSet | np.ndarray, cfg: ClutterConfig | None = None,
               word: Optional[int] = None, session: Optional[str] = None) -> PreprocFrameSet:
    """Clutter removal, then crop to bins 1..100, then DC removal."""
    frames = remove_dc(crop_fast_time(remove_clutter(raw, cfg), 1, N_SELECTED))
    return PreprocFrameSet(frames, word=word, session=session)


class RadarPreprocessor(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapping :func:`preprocess` for pipelines.

    ``X`` is a sequence of ``M_i x N`` arrays (ragged in ``M``); ``transform``
    returns a list of ``M_i x (hi - lo + 1)`` arrays.
    """

    def __init__(self, alpha: float = 0.95, lo: int = 1, hi: int = N_SELECTED):
        self.alpha = alpha
        self.lo = lo
        self.hi = hi

    def fit(self, X, y=None):
        from .estimator import check_framesets

        ClutterConfig(self.alpha)
        X = check_framesets(X)
        n = {x.shape[1] for x in X}
        if len(n) != 1:
            raise ValueError(f"all frame sets need the same fast-time extent, got {sorted(n)}")
        self.n_features_in_ = n.pop()
        if not 1 <= self.lo <= self.hi <= self.n_features_in_:
            raise ValueError(f"fast-time range {self.lo}..{self.hi} outside 1..{self.n_features_in_}")
        return self

    def transform(self, X):
        from .estimator import check_framesets, check_is_fitted

        check_is_fitted(self, "n_features_in_")
        X = check_framesets(X, n_features=self.n_features_in_)
        cfg = ClutterConfig(self.alpha)
        return [remove_dc(crop_fast_time(remove_clutter(x, cfg), self.lo, self.hi)) for x in X]
