"""End-to-end acceptance checks.  Each test records a PASS/FAIL line that
is printed in the terminal summary (and immediately, uncaptured)."""
import math
import time

import numpy as np
import pytest

from conftest import record
from oracles import centroid_loso_accuracy
from uwb_ssr.data import SynthConfig, collate, synth_frameset, synth_preprocessed
from uwb_ssr.gradcheck import full_model_check, primitive_suite
from uwb_ssr.model import AttentionTCN, ModelConfig
from uwb_ssr.preprocess import (ClutterConfig, crop_fast_time, preprocess, remove_clutter,
                                remove_dc)
from uwb_ssr.tensor import Tape, TemporalMask, Tensor
from uwb_ssr.training import (AdamWState, CVReport, EarlyStopping, FoldResult, TrainConfig,
                              clip_grad_norm, evaluate, label_smoothed_ce, loso_split, lr_at,
                              run_loso_cv, train_epoch)

SCALED = SynthConfig(n_words=10, n_sessions=6)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        return record(name, ok, detail)
    return emit


def test_gradient_suite(report):
    t0 = time.perf_counter()
    errors = primitive_suite(seed=0)
    errors["full_model"] = full_model_check(n_coords=1000, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    ok = worst < 1e-4 and elapsed < 300
    assert report("gradient suite", ok,
                  f"max rel err {worst:.2e} over {len(errors)} checks "
                  f"(full model {errors['full_model']:.2e}, 1000 coords), {elapsed:.0f}s")


def test_identity_at_init(report):
    rng = np.random.default_rng(0)
    batch = collate([rng.normal(size=(n, 100)) for n in (120, 95, 160, 81)])
    full = AttentionTCN(ModelConfig(), seed=3)
    ablated = AttentionTCN(ModelConfig(use_attention=False), seed=3)
    za = full.forward(batch.inputs, batch.mask).data
    zb = ablated.forward(batch.inputs, batch.mask).data
    ok = np.array_equal(za, zb) and za.shape == (4, 50)
    assert report("identity at init", ok, f"max |diff| {np.abs(za - zb).max():.1e} (bitwise required)")


def test_receptive_field(report):
    cfg = ModelConfig(use_batchnorm=False, use_attention=False)
    model = AttentionTCN(cfg, seed=0)
    for name, t in model.params.items():
        t.data = np.zeros_like(t.data) if name.endswith("bias") else np.abs(t.data)
    m = 401
    x = np.zeros((1, 100, m))
    x[0, :, m // 2] = 1.0
    h = model.features(Tensor(x), TemporalMask.full(1, m)).data[0]
    nz = np.nonzero(np.abs(h).sum(axis=0))[0]
    span = int(nz.max() - nz.min() + 1)
    analytic = 1 + 2 + 4 * sum(cfg.dilations)
    ok = span == analytic == cfg.receptive_field() == 127
    assert report("receptive field", ok, f"impulse support {span} frames, analytic {analytic}")


def _reference_clutter(x, alpha):
    out = np.zeros_like(x)
    c = x[0].copy()
    for t in range(1, x.shape[0]):
        c = alpha * c + (1 - alpha) * x[t]
        out[t] = x[t] - c
    return out


def test_preprocessing_oracle(report):
    rng = np.random.default_rng(1)
    cfg = ClutterConfig()
    bitwise, worst = True, 0.0
    for _ in range(100):
        m = int(rng.integers(1, 200))
        x = rng.normal(size=(m, 256)) * rng.uniform(0.1, 50) + rng.normal(size=256) * 20
        got = preprocess(x, cfg).frames
        bitwise &= np.array_equal(got, remove_dc(crop_fast_time(remove_clutter(x, cfg), 1, 100)))
        ref = _reference_clutter(x, cfg.alpha)[:, :100]
        ref = ref - ref.mean(axis=1, keepdims=True)
        worst = max(worst, float(np.abs(got - ref).max() / max(1.0, np.abs(ref).max())))
    constant = all(not preprocess(np.tile(rng.normal(size=256) * 30, (int(rng.integers(1, 90)), 1))).frames.any()
                   for _ in range(20))
    ratios = []
    for si in range(SCALED.n_sessions):
        raw = [synth_frameset(SCALED, si, w).frames for w in range(SCALED.n_words)]
        static = np.linalg.norm(np.concatenate(raw).mean(axis=0))
        residual = np.linalg.norm(np.concatenate([remove_clutter(r, cfg) for r in raw]).mean(axis=0))
        ratios.append(static / residual)
    ok = bitwise and worst < 1e-12 and constant and min(ratios) >= 10
    assert report("preprocessing oracle", ok,
                  f"composition bitwise={bitwise}, loop-oracle err {worst:.1e}, constant->0 {constant}, "
                  f"clutter attenuation min {min(ratios):.1f}x")


def test_overfit_two_words(report):
    data = synth_preprocessed(SynthConfig(n_words=2, n_sessions=8, seed=0))
    cfg = TrainConfig(max_epochs=200)
    model = AttentionTCN(ModelConfig(n_classes=2), seed=0)
    state = AdamWState.create(model.parameters())
    t0 = time.perf_counter()
    reached = None
    for epoch in range(cfg.max_epochs):
        train_epoch(model, data, state, cfg, lr_at(epoch, cfg), np.random.default_rng([cfg.seed, epoch]))
        if evaluate(model, data).accuracy == 1.0:
            reached = epoch + 1
            break
    elapsed = time.perf_counter() - t0
    ok = reached is not None and elapsed < 600
    assert report("overfit 2 words x 8 samples", ok,
                  f"100% training accuracy at epoch {reached} of 200, {elapsed:.0f}s")


def test_scaled_loso(report):
    data = synth_preprocessed(SCALED)
    oracle = centroid_loso_accuracy(data)
    assert report("scaled LOSO: centroid oracle gate", oracle >= 5 * 0.1,
                  f"nearest-centroid accuracy {oracle:.3f} (need >= 0.5)")
    t0 = time.perf_counter()
    rep = run_loso_cv(data, ModelConfig(n_classes=10), TrainConfig(max_epochs=30))
    elapsed = time.perf_counter() - t0
    tested = sorted(f.test_session for f in rep.folds)
    once = tested == sorted({s.session for s in data}) and len(tested) == 6
    ok = rep.mean >= 0.80 and once and elapsed < 1800
    per_fold = " ".join(f"{f.test_session}:{f.accuracy:.2f}" for f in rep.folds)
    assert report("scaled LOSO 10 words x 6 sessions", ok,
                  f"mean {rep.mean:.3f} std {rep.std:.3f} [{per_fold}], each session tested once={once}, "
                  f"{elapsed / 60:.1f} min")


def test_protocol_invariants(report):
    sessions = [f"s{i:02d}" for i in range(1, 21)]
    plans = [loso_split(sessions, k, seed=0) for k in range(20)]
    partitions = all(
        (len(p.val_sessions), len(p.train_sessions)) == (3, 16)
        and {p.test_session} | set(p.val_sessions) | set(p.train_sessions) == set(sessions)
        and not set(p.val_sessions) & set(p.train_sessions) and p.test_session not in p.val_sessions + p.train_sessions
        for p in plans) and sorted(p.test_session for p in plans) == sessions

    # clipping on real model gradients blown up by a large loss scale, then on random draws
    rng = np.random.default_rng(2)
    model = AttentionTCN(ModelConfig(channels=(16, 32, 48), n_classes=5, head_hidden=16), seed=0)
    batch = collate([rng.normal(size=(n, 100)) for n in (30, 22, 27)], labels=[0, 3, 4])
    with Tape():
        loss = label_smoothed_ce(model.forward(batch.inputs, batch.mask, training=True, rng=rng), batch.labels)
        (loss * 1e4).backward()
    norms = []
    grads = [p.grad.copy() for p in model.parameters()]
    clip_grad_norm(grads, 1.0)
    norms.append(math.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    for _ in range(500):
        grads = [rng.normal(size=rng.integers(1, 50)) * 10 ** rng.uniform(-3, 4) for _ in range(rng.integers(1, 6))]
        clip_grad_norm(grads, 1.0)
        norms.append(math.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    clipped = max(norms) <= 1.0 + 1e-9

    stopper = EarlyStopping(18)
    trace = [1.0] + [1.0 + 0.001 * k for k in range(1, 19)] + [0.0] * 5
    stop_epoch = next(e for e, v in enumerate(trace, 1) if stopper.update(v, e))
    patience = stop_epoch == 19 and stopper.best_epoch == 1

    reference = [88, 92, 94, 88, 92, 90, 92, 92, 90, 92, 84, 98, 88, 94, 92, 92, 92, 86, 90, 96]
    rep = CVReport([FoldResult(i, s, a / 100, 1, 1) for i, (s, a) in enumerate(zip(sessions, reference))])
    emitted = CVReport.from_csv(rep.to_csv())
    rows = rep.to_csv().strip().splitlines()
    mean_row, std_row = float(rows[-2].split(",")[2]), float(rows[-1].split(",")[2])
    accs = emitted.accuracies
    consistent = (abs(accs.mean() - mean_row) <= 1e-12
                  and abs(math.sqrt(((accs - accs.mean()) ** 2).sum() / (accs.size - 1)) - std_row) <= 1e-12)

    ok = partitions and clipped and patience and consistent
    assert report("protocol invariants", ok,
                  f"partitions 1/3/16 exhaustive={partitions}, max clipped norm {max(norms):.12f}, "
                  f"patience stop at epoch {stop_epoch} best {stopper.best_epoch}, report consistent={consistent} "
                  f"(mean {100 * rep.mean:.1f}%, std {100 * rep.std:.1f}%)")


def test_mask_soundness(report):
    data = synth_preprocessed(SynthConfig(n_words=10, n_sessions=5, seed=7))
    assert len(data) == 50
    model = AttentionTCN(ModelConfig(n_classes=10), seed=1)
    # open the attention gates so masked softmax is exercised
    for level in range(model.config.n_levels):
        model.params[f"blocks.{level}.attn.gamma"].data[:] = 0.5
    worst = 0.0
    for start in range(0, 50, 10):
        chunk = data[start:start + 10]
        short = collate(chunk, max_len=200)
        long = collate(chunk, max_len=500)
        za = model.forward(short.inputs, short.mask).data
        zb = model.forward(long.inputs, long.mask).data
        worst = max(worst, float(np.abs(za - zb).max()))
    ok = worst <= 1e-10
    assert report("mask soundness", ok, f"max |logit diff| 200 vs 500 padding {worst:.1e} over 50 samples")
