"""scikit-learn compatible front end for the network.

Inputs are ragged: ``X`` is a sequence of ``M_i x F`` frame matrices, so the
usual ``check_array`` does not apply and :func:`check_framesets` stands in.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .data import iter_batches
from .model import AttentionTCN, ModelConfig
from .preprocess import PreprocFrameSet
from .training import FitHistory, TrainConfig, fit_model

__all__ = ["check_framesets", "check_is_fitted", "AttentionTCNClassifier"]


def check_framesets(X, n_features: Optional[int] = None, min_frames: int = 1) -> list[np.ndarray]:
    """Validate a sequence of 2-D float frame matrices and return them as float64."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("expected a sequence of frame matrices, got a single 2-D array; wrap it in a list")
    if isinstance(X, PreprocFrameSet) or not hasattr(X, "__len__"):
        raise TypeError(f"expected a sequence of frame matrices, got {type(X).__name__}")
    if len(X) == 0:
        raise ValueError("found an empty sequence of frame sets")
    out = []
    for i, x in enumerate(X):
        a = np.asarray(x.frames if isinstance(x, PreprocFrameSet) else x, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"frame set {i} must be 2-D (frames x features), got shape {a.shape}")
        if a.shape[0] < min_frames:
            raise ValueError(f"frame set {i} has {a.shape[0]} frames, need at least {min_frames}")
        if n_features is not None and a.shape[1] != n_features:
            raise ValueError(f"frame set {i} has {a.shape[1]} features, expected {n_features}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"frame set {i} contains NaN or infinity")
        out.append(a)
    return out


class AttentionTCNClassifier(ClassifierMixin, BaseEstimator):
    """Attention-enhanced TCN word classifier.

    Hyperparameters mirror :class:`ModelConfig` and :class:`TrainConfig`.
    ``fit`` accepts optional validation data for early stopping; without it
    training runs ``max_epochs`` epochs.
    """

    def __init__(self, channels=(64, 96, 128, 256, 384, 512), kernel_size=3, dropout=0.25,
                 se_reduction=16, dk_divisor=8, head_hidden=256, lr_init=0.0008,
                 weight_decay=1e-4, batch_size=32, label_smoothing=0.15, patience=18,
                 clip_norm=1.0, warmup_epochs=5, max_epochs=150, random_state=0):
        self.channels = channels
        self.kernel_size = kernel_size
        self.dropout = dropout
        self.se_reduction = se_reduction
        self.dk_divisor = dk_divisor
        self.head_hidden = head_hidden
        self.lr_init = lr_init
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.label_smoothing = label_smoothing
        self.patience = patience
        self.clip_norm = clip_norm
        self.warmup_epochs = warmup_epochs
        self.max_epochs = max_epochs
        self.random_state = random_state

    def _configs(self, n_features: int, n_classes: int) -> tuple[ModelConfig, TrainConfig]:
        mcfg = ModelConfig(channels=tuple(self.channels), kernel_size=self.kernel_size,
                           dropout=self.dropout, se_reduction=self.se_reduction,
                           dk_divisor=self.dk_divisor, n_classes=n_classes,
                           head_hidden=self.head_hidden, in_channels=n_features)
        tcfg = TrainConfig(lr_init=self.lr_init, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, label_smoothing=self.label_smoothing,
                           patience=self.patience, clip_norm=self.clip_norm,
                           warmup_epochs=self.warmup_epochs, max_epochs=self.max_epochs,
                           seed=self.random_state)
        return mcfg, tcfg

    def _wrap(self, X, y) -> list[PreprocFrameSet]:
        codes = np.searchsorted(self.classes_, y)
        return [PreprocFrameSet(x, int(c)) for x, c in zip(X, codes)]

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_framesets(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y must have shape ({len(X)},), got {y.shape}")
        self.classes_ = unique_labels(y)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X[0].shape[1]
        X = check_framesets(X, self.n_features_in_)
        mcfg, tcfg = self._configs(self.n_features_in_, self.classes_.size)
        val = None
        if X_val is not None:
            X_val = check_framesets(X_val, self.n_features_in_)
            unseen = set(np.asarray(y_val).tolist()) - set(self.classes_.tolist())
            if unseen:
                raise ValueError(f"validation labels not seen in training: {sorted(unseen)}")
            val = self._wrap(X_val, np.asarray(y_val))
        self.model_ = AttentionTCN(mcfg, seed=np.random.default_rng([self.random_state, 0xA11]))
        self.history_: FitHistory = fit_model(self.model_, self._wrap(X, y), val, tcfg)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_framesets(X, self.n_features_in_)
        out = [self.model_.forward(b.inputs, b.mask).data
               for b in iter_batches([PreprocFrameSet(x) for x in X], self.batch_size)]
        return np.concatenate(out)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        z = self.decision_function(X)
        return self.classes_[z.argmax(axis=1)]


def frames_of(samples: Sequence[PreprocFrameSet]) -> tuple[list[np.ndarray], np.ndarray]:
    """Split frame sets into the ``(X, y)`` pair the estimators take."""
    return [s.frames for s in samples], np.array([s.word for s in samples])
