"""Optimization and leave-one-session-out evaluation protocol."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import dataset_checksum, iter_batches
from .model import AttentionTCN, ModelConfig, save_checkpoint
from .preprocess import PreprocFrameSet
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_init: float = 0.0008
    weight_decay: float = 1e-4
    batch_size: int = 32
    label_smoothing: float = 0.15
    patience: int = 18
    clip_norm: float = 1.0
    warmup_epochs: int = 5
    max_epochs: int = 150
    lr_min: Optional[float] = None
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    val_sessions: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.lr_min is None:
            self.lr_min = self.lr_init / 100
        self.betas = tuple(self.betas)
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if not 0 <= self.warmup_epochs < self.max_epochs:
            raise ValueError("need 0 <= warmup_epochs < max_epochs")
        if self.batch_size < 1 or self.patience < 1:
            raise ValueError("batch_size and patience must be positive")

    def n_val_sessions(self, n_sessions: int) -> int:
        """Validation sessions per fold: 3 of 20, scaled for smaller corpora."""
        if self.val_sessions is not None:
            return self.val_sessions
        return max(1, round(3 * (n_sessions - 1) / 19))


# -- loss, schedule, clipping, optimizer ---------------------------------------

def smoothed_targets(labels: np.ndarray, n_classes: int, alpha: float) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got {labels.min()}..{labels.max()}")
    target = np.full((labels.size, n_classes), alpha / n_classes)
    target[np.arange(labels.size), labels] += 1.0 - alpha
    return target


def label_smoothed_ce(logits: Tensor, labels, alpha: float = 0.15) -> Tensor:
    """Mean over the batch of ``-sum(target * log_softmax(logits))``."""
    b, w = logits.shape
    target = smoothed_targets(labels, w, alpha)
    return T.sum(T.log_softmax(logits, axis=1) * Tensor(target)) * (-1.0 / b)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_init`` at ``warmup_epochs``, then cosine decay to ``lr_min``."""
    if epoch < cfg.warmup_epochs:
        return cfg.lr_init * (epoch + 1) / (cfg.warmup_epochs + 1)
    t = epoch - cfg.warmup_epochs
    span = cfg.max_epochs - cfg.warmup_epochs
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + math.cos(math.pi * t / span))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float = 1.0) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if not math.isfinite(norm):
        raise FloatingPointError(f"non-finite gradient norm {norm}")
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= scale
    return scale


@dataclass
class AdamWState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def create(cls, params: Sequence[Tensor]) -> "AdamWState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamWState,
               cfg: TrainConfig, lr: float) -> None:
    """Bias-corrected Adam update with decoupled weight decay, in place."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; AdamW step rejected")
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    decay = 1.0 - lr * cfg.weight_decay
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# -- LOSO folds ----------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    test_session: str
    val_sessions: tuple
    train_sessions: tuple


def loso_split(sessions: Sequence[str], fold_index: int, seed: int = 0,
               n_val: int = 3) -> FoldPlan:
    """Hold out ``sessions[fold_index]``; draw ``n_val`` validation sessions from the rest."""
    sessions = list(sessions)
    if len(set(sessions)) != len(sessions):
        raise ValueError("duplicate session ids")
    if not 0 <= fold_index < len(sessions):
        raise ValueError(f"fold_index {fold_index} outside [0, {len(sessions)})")
    rest = sessions[:fold_index] + sessions[fold_index + 1:]
    if not 1 <= n_val < len(rest):
        raise ValueError(f"cannot take {n_val} validation sessions from {len(rest)}")
    rng = np.random.default_rng([seed, fold_index])
    pick = set(rng.choice(len(rest), size=n_val, replace=False).tolist())
    val = tuple(s for i, s in enumerate(rest) if i in pick)
    train = tuple(s for i, s in enumerate(rest) if i not in pick)
    return FoldPlan(sessions[fold_index], val, train)


class EarlyStopping:
    """Best-so-far counter: stop after ``patience`` epochs without a new minimum."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    loss: float

    @property
    def correct(self) -> int:
        return int(np.trace(self.confusion))

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def predict_logits(model: AttentionTCN, samples: Sequence[PreprocFrameSet],
                   batch_size: int = 32) -> np.ndarray:
    out = [model.forward(b.inputs, b.mask).data for b in iter_batches(samples, batch_size)]
    return np.concatenate(out)


def evaluate(model: AttentionTCN, samples: Sequence[PreprocFrameSet], batch_size: int = 32,
             label_smoothing: float = 0.0) -> EvalResult:
    """Eval-mode accuracy, ``W x W`` confusion (rows true, cols predicted) and mean loss."""
    if len(samples) == 0:
        raise ValueError("evaluate needs at least one sample")
    w = model.config.n_classes
    conf = np.zeros((w, w), dtype=np.int64)
    loss_sum = 0.0
    for batch in iter_batches(samples, batch_size):
        logits = model.forward(batch.inputs, batch.mask)
        loss_sum += label_smoothed_ce(logits, batch.labels, label_smoothing).item() * len(batch)
        np.add.at(conf, (batch.labels, logits.data.argmax(axis=1)), 1)
    return EvalResult(np.trace(conf) / conf.sum(), conf, loss_sum / len(samples))


@dataclass
class FitHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0


def train_epoch(model: AttentionTCN, samples: Sequence[PreprocFrameSet], state: AdamWState,
                cfg: TrainConfig, lr: float, rng: np.random.Generator) -> float:
    """One shuffled pass; returns the sample-weighted mean training loss."""
    params = model.parameters()
    total, seen = 0.0, 0
    for batch in iter_batches(samples, cfg.batch_size, rng, drop_singleton=True):
        model.zero_grad()
        with Tape():
            logits = model.forward(batch.inputs, batch.mask, training=True, rng=rng)
            loss = label_smoothed_ce(logits, batch.labels, cfg.label_smoothing)
            loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        clip_grad_norm(grads, cfg.clip_norm)
        adamw_step(params, grads, state, cfg, lr)
        total += loss.item() * len(batch)
        seen += len(batch)
    model.zero_grad()
    return total / max(seen, 1)


def fit_model(model: AttentionTCN, train: Sequence[PreprocFrameSet],
              val: Optional[Sequence[PreprocFrameSet]], cfg: TrainConfig,
              stream: Sequence[int] = (), progress=None) -> FitHistory:
    """Train with early stopping on validation loss; restores the best epoch.

    Epoch ``e`` shuffles and drops out with a generator seeded from
    ``(cfg.seed, *stream, e)``.  Epochs are reported 1-based.  Without
    validation data every epoch runs and the final weights are kept.
    """
    if len(train) == 0:
        raise ValueError("empty training split")
    state = AdamWState.create(model.parameters())
    stopper = EarlyStopping(cfg.patience)
    hist = FitHistory()
    best_state = None
    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        rng = np.random.default_rng([cfg.seed, *stream, epoch])
        hist.train_loss.append(train_epoch(model, train, state, cfg, lr, rng))
        hist.lr.append(lr)
        hist.epochs_run = epoch + 1
        if val:
            vloss = evaluate(model, val, cfg.batch_size, cfg.label_smoothing).loss
            hist.val_loss.append(vloss)
            stop = stopper.update(vloss, epoch + 1)
            if stopper.best_epoch == epoch + 1:
                best_state = model.state_dict()
        else:
            stop = False
        if progress is not None:
            progress(hist)
        if stop:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
        hist.best_epoch = stopper.best_epoch
    else:
        hist.best_epoch = hist.epochs_run
    return hist


@dataclass
class FoldResult:
    fold: int
    test_session: str
    accuracy: float
    best_epoch: int
    epochs_run: int
    correct: int = 0
    total: int = 0
    confusion: Optional[np.ndarray] = None
    history: Optional[FitHistory] = None


def _split(data: Sequence[PreprocFrameSet], sessions) -> list[PreprocFrameSet]:
    keep = set(sessions)
    return [s for s in data if s.session in keep]


def train_fold(plan: FoldPlan, data: Sequence[PreprocFrameSet], model_cfg: ModelConfig,
               train_cfg: TrainConfig, fold: int = 0, checkpoint: Optional[Path] = None,
               progress=None) -> FoldResult:
    train = _split(data, plan.train_sessions)
    val = _split(data, plan.val_sessions)
    test = _split(data, [plan.test_session])
    if not train or not val or not test:
        raise ValueError(f"fold {fold}: empty split (train={len(train)}, val={len(val)}, test={len(test)})")
    model = AttentionTCN(model_cfg, seed=np.random.default_rng([train_cfg.seed, fold, 0xA11]))
    hist = fit_model(model, train, val, train_cfg, stream=(fold,), progress=progress)
    res = evaluate(model, test, train_cfg.batch_size)
    if checkpoint is not None:
        save_checkpoint(model, checkpoint, {"fold": fold, "test_session": plan.test_session,
                                            "best_epoch": hist.best_epoch})
    return FoldResult(fold, plan.test_session, float(res.accuracy), hist.best_epoch, hist.epochs_run,
                      res.correct, res.total, res.confusion, hist)


# -- cross-validation report ---------------------------------------------------

@dataclass
class CVReport:
    folds: list[FoldResult]

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([f.accuracy for f in self.folds])

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        """Sample (n - 1) standard deviation across folds; 0 for a single fold."""
        acc = self.accuracies
        return float(np.std(acc, ddof=1)) if acc.size > 1 else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "test_session", "accuracy", "best_epoch", "epochs_run"])
        for f in self.folds:
            w.writerow([f.fold, f.test_session, repr(f.accuracy), f.best_epoch, f.epochs_run])
        w.writerow(["mean", "", repr(self.mean), "", ""])
        w.writerow(["std", "", repr(self.std), "", ""])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = ["Test session | Accuracy", "-------------+---------"]
        lines += [f"{f.test_session:>12} | {100 * f.accuracy:6.1f}%" for f in self.folds]
        lines.append("-------------+---------")
        lines.append(f"{'Average':>12} | {100 * self.mean:6.1f}%")
        lines.append(f"{'Std':>12} | {100 * self.std:6.1f}%")
        return "\n".join(lines)

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "cv_report.csv").write_text(self.to_csv())
        (out_dir / "cv_report.txt").write_text(self.to_table() + "\n")

    @classmethod
    def from_csv(cls, text: str) -> "CVReport":
        rows = [r for r in csv.DictReader(io.StringIO(text)) if r["fold"] not in ("mean", "std")]
        return cls([FoldResult(int(r["fold"]), r["test_session"], float(r["accuracy"]),
                               int(r["best_epoch"]), int(r["epochs_run"])) for r in rows])


def _run_fold(args) -> FoldResult:
    fold, plan, data, model_cfg, train_cfg, ckpt = args
    res = train_fold(plan, data, model_cfg, train_cfg, fold, ckpt)
    res.history = None
    return res


def run_loso_cv(data: Sequence[PreprocFrameSet], model_cfg: ModelConfig, train_cfg: TrainConfig,
                sessions: Optional[Sequence[str]] = None, workers: int = 1,
                out_dir=None) -> CVReport:
    """One fold per session.  A failing fold writes the partial report and re-raises."""
    if sessions is None:
        sessions = sorted({s.session for s in data})
    sessions = list(sessions)
    if len(sessions) < 4:
        raise ValueError(f"LOSO needs at least 4 sessions, got {len(sessions)}")
    n_val = train_cfg.n_val_sessions(len(sessions))
    checksum = dataset_checksum(data)
    jobs = []
    for k in range(len(sessions)):
        plan = loso_split(sessions, k, train_cfg.seed, n_val)
        ckpt = Path(out_dir) / f"fold_{k:02d}.ckpt" if out_dir is not None else None
        jobs.append((k, plan, data, model_cfg, train_cfg, ckpt))
    folds: list[FoldResult] = []
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for res in pool.map(_run_fold, jobs):
                    folds.append(res)
        else:
            for job in jobs:
                res = _run_fold(job)
                log.info("fold %d (%s): accuracy %.3f, best epoch %d of %d", res.fold,
                         res.test_session, res.accuracy, res.best_epoch, res.epochs_run)
                folds.append(res)
    except Exception:
        if out_dir is not None and folds:
            CVReport(folds).save(out_dir)
        raise
    if dataset_checksum(data) != checksum:
        raise RuntimeError("dataset was modified during cross-validation")
    report = CVReport(folds)
    if out_dir is not None:
        report.save(out_dir)
    return report


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
