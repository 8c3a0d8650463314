import struct

import numpy as np
import numpy.testing as npt
import pytest

from oracles import centroid_loso_accuracy, pooled_features
from uwb_ssr.data import (HEADER_SIZE, FrameSetFormatError, SessionManifest, SynthConfig, collate,
                          dataset_checksum, generate_dataset, iter_batches, load_dataset,
                          load_frameset, preprocess_dataset, read_header, save_frameset,
                          synth_frameset, synth_preprocessed)
from uwb_ssr.preprocess import PreprocFrameSet, RawFrameSet, remove_clutter

SMALL = SynthConfig(n_words=4, n_sessions=3, seed=11)


def test_header_layout_size():
    assert HEADER_SIZE == 4 + 2 + 2 + 4 + 4 + 4 == struct.calcsize("<4sHHIIf")


def test_roundtrip_bitwise(tmp_path):
    x = np.random.default_rng(0).normal(size=(17, 256)).astype(np.float32).astype(np.float64)
    save_frameset(RawFrameSet(x, 99.5), tmp_path / "a.uwbf")
    back = load_frameset(tmp_path / "a.uwbf")
    npt.assert_array_equal(back.frames, x)
    assert back.frame_rate_hz == 99.5


def test_minimal_file_size(tmp_path):
    p = tmp_path / "m1.uwbf"
    save_frameset(RawFrameSet(np.ones((1, 256))), p)
    buf = p.read_bytes()
    assert len(buf) == HEADER_SIZE + 1024
    assert buf[:4] == b"UWBF"
    assert read_header(buf) == (1, 256, 100.0)


def test_parse_errors(tmp_path):
    p = tmp_path / "x.uwbf"
    save_frameset(RawFrameSet(np.ones((3, 256))), p)
    buf = p.read_bytes()
    for bad, msg in [(buf[:-5], "truncated payload"), (buf[:10], "truncated header"),
                     (b"XXXX" + buf[4:], "bad magic"), (buf + b"\0", "trailing"),
                     (buf[:4] + struct.pack("<H", 9) + buf[6:], "version")]:
        p.write_bytes(bad)
        with pytest.raises(FrameSetFormatError, match=msg):
            load_frameset(p)
    huge = struct.pack("<4sHHIIf", b"UWBF", 1, 0, 1 << 20, 1 << 20, 100.0)
    with pytest.raises(FrameSetFormatError, match="implausible"):
        read_header(huge)


def test_generation_deterministic(tmp_path):
    a = generate_dataset(SMALL, tmp_path / "a")
    b = generate_dataset(SMALL, tmp_path / "b")
    for ra, rb in zip(a.samples, b.samples):
        assert a.path_of(ra).read_bytes() == b.path_of(rb).read_bytes()
    other = synth_frameset(SynthConfig(n_words=4, n_sessions=3, seed=12), 0, 0)
    assert not np.array_equal(other.frames, synth_frameset(SMALL, 0, 0).frames)


def test_parallel_generation_matches_serial(tmp_path):
    a = generate_dataset(SMALL, tmp_path / "a", workers=1)
    b = generate_dataset(SMALL, tmp_path / "b", workers=2)
    assert all(a.path_of(r).read_bytes() == b.path_of(r).read_bytes() for r in a.samples)


def test_manifest_contents(tmp_path):
    m = generate_dataset(SMALL, tmp_path)
    pairs = [(r.session, r.word) for r in m.samples]
    assert len(pairs) == len(set(pairs)) == 12
    again = SessionManifest.load(tmp_path)
    assert again.words == m.words and again.sessions == m.sessions
    for r in again.samples:
        fs = load_frameset(again.path_of(r))
        assert fs.frames.shape == (r.frames, 256)
        assert SMALL.frames_min <= r.frames <= SMALL.frames_max
        assert again.path_of(r) == tmp_path / "sessions" / r.session / f"{r.word}.uwbf"


def test_default_config_sample_count():
    cfg = SynthConfig()
    assert cfg.n_words * cfg.n_sessions == 1000
    assert (cfg.frames_min, cfg.frames_max, cfg.n_reflectors) == (80, 160, 3)


def test_load_matches_in_memory(tmp_path):
    generate_dataset(SMALL, tmp_path / "raw")
    _, loaded = load_dataset(tmp_path / "raw")
    mem = synth_preprocessed(SMALL)
    assert dataset_checksum(loaded) == dataset_checksum(mem)
    preprocess_dataset(tmp_path / "raw", tmp_path / "pp")
    man, pp = load_dataset(tmp_path / "pp")
    assert man.preprocessed
    for a, b in zip(pp, mem):
        assert a.frames.shape == b.frames.shape and (a.word, a.session) == (b.word, b.session)
        npt.assert_allclose(a.frames, b.frames, atol=1e-5)
        assert np.abs(a.frames.mean(axis=1)).max() < 1e-12
    with pytest.raises(ValueError, match="already"):
        preprocess_dataset(tmp_path / "pp", tmp_path / "pp2")


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(frames_min=4)
    with pytest.raises(ValueError):
        SynthConfig(noise_std=-1)


def test_collate_cases():
    rng = np.random.default_rng(0)
    a = PreprocFrameSet(rng.normal(size=(3, 100)), 1)
    b = PreprocFrameSet(rng.normal(size=(5, 100)), 4)
    batch = collate([a, b])
    assert batch.inputs.shape == (2, 100, 5)
    npt.assert_array_equal(batch.mask.valid_len, [3, 5])
    npt.assert_array_equal(batch.inputs.data[0, :, 3:], 0.0)
    npt.assert_array_equal(batch.inputs.data[0, :, :3], a.frames.T)
    npt.assert_array_equal(batch.labels, [1, 4])
    one = collate([b])
    assert one.inputs.shape == (1, 100, 5) and one.mask.valid_len[0] == 5
    with pytest.raises(ValueError):
        collate([])
    with pytest.raises(ValueError):
        collate([a, PreprocFrameSet(np.ones((3, 50)), 0)])


def test_shuffled_batches_same_content():
    rng = np.random.default_rng(1)
    samples = [PreprocFrameSet(rng.normal(size=(rng.integers(2, 9), 100)), i) for i in range(11)]

    def content(batches):
        items = []
        for bt in batches:
            for i, n in enumerate(bt.mask.valid_len):
                items.append((int(bt.labels[i]), bt.inputs.data[i, :, :n].tobytes()))
        return sorted(items)

    plain = list(iter_batches(samples, 4))
    shuf = list(iter_batches(samples, 4, rng=np.random.default_rng(5)))
    assert all(len(bt) <= 4 for bt in shuf)
    assert content(plain) == content(shuf)
    assert len(list(iter_batches(samples[:9], 4, drop_singleton=True))) == 2


def test_static_clutter_present_and_removed():
    cfg = SynthConfig(n_words=6, n_sessions=3, seed=2)
    for si in range(cfg.n_sessions):
        raw = [synth_frameset(cfg, si, w).frames for w in range(cfg.n_words)]
        static = np.concatenate(raw).mean(axis=0)
        assert np.linalg.norm(static) >= cfg.clutter_amplitude / 2
        residual = np.concatenate([remove_clutter(r) for r in raw]).mean(axis=0)
        assert np.linalg.norm(static) / np.linalg.norm(residual) >= 10


def test_templates_session_independent():
    cfg = SynthConfig(n_words=10, n_sessions=4, seed=3)
    samples = synth_preprocessed(cfg)
    f = pooled_features(samples)
    words = np.array([s.word for s in samples])
    sess = np.array([s.session for s in samples])
    c = f @ f.T
    cross = sess[:, None] != sess[None, :]
    same = c[cross & (words[:, None] == words[None, :])].mean()
    diff = c[cross & (words[:, None] != words[None, :])].mean()
    assert same > diff


def test_centroid_oracle_well_above_chance():
    acc = centroid_loso_accuracy(synth_preprocessed(SynthConfig(n_words=10, n_sessions=6)))
    assert acc >= 5 * 0.1
