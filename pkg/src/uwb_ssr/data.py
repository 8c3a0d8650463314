"""Synthetic frame-set generation, the UWBF file format, manifests and batching.

UWBF layout (little-endian)::

    offset  size  field
    0       4     magic b"UWBF"
    4       2     version (u16, = 1)
    6       2     flags (u16, = 0)
    8       4     M, slow-time frames (u32)
    12      4     N, fast-time bins (u32)
    16      4     frame rate in Hz (f32)
    20      4*M*N amplitudes, f32, row-major (slow-time major)

A dataset directory holds ``manifest.json`` and ``sessions/<sid>/<word>.uwbf``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .preprocess import N_FAST, ClutterConfig, PreprocFrameSet, RawFrameSet, preprocess, remove_dc
from .tensor import Tensor, TemporalMask

MAGIC = b"UWBF"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIf")
HEADER_SIZE = _HEADER.size
MAX_ELEMENTS = 1 << 28
MANIFEST_NAME = "manifest.json"


class FrameSetFormatError(ValueError):
    """A UWBF file or manifest could not be parsed."""


# -- UWBF files ----------------------------------------------------------------

def save_frameset(fs: RawFrameSet, path) -> None:
    path = Path(path)
    m, n = fs.frames.shape
    header = _HEADER.pack(MAGIC, VERSION, 0, m, n, fs.frame_rate_hz)
    payload = np.ascontiguousarray(fs.frames, dtype="<f4").tobytes()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(header + payload)
    except OSError as exc:
        raise OSError(f"cannot write frame set to {path}: {exc}") from exc


def read_header(buf: bytes, source="<bytes>") -> tuple[int, int, float]:
    if len(buf) < HEADER_SIZE:
        raise FrameSetFormatError(f"{source}: truncated header ({len(buf)} < {HEADER_SIZE} bytes)")
    magic, version, flags, m, n, rate = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FrameSetFormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FrameSetFormatError(f"{source}: unsupported version {version}")
    if flags != 0:
        raise FrameSetFormatError(f"{source}: unknown flags {flags:#06x}")
    if m < 1 or n < 1 or m * n > MAX_ELEMENTS:
        raise FrameSetFormatError(f"{source}: implausible shape {m} x {n}")
    return m, n, rate


def load_frameset(path) -> RawFrameSet:
    path = Path(path)
    buf = path.read_bytes()
    m, n, rate = read_header(buf, path)
    expected = HEADER_SIZE + 4 * m * n
    if len(buf) < expected:
        raise FrameSetFormatError(f"{path}: truncated payload ({len(buf)} of {expected} bytes)")
    if len(buf) > expected:
        raise FrameSetFormatError(f"{path}: {len(buf) - expected} trailing bytes")
    frames = np.frombuffer(buf, dtype="<f4", count=m * n, offset=HEADER_SIZE).reshape(m, n)
    return RawFrameSet(frames.astype(np.float64), float(rate))


# -- manifest ------------------------------------------------------------------

@dataclass
class SampleRecord:
    session: str
    word: str
    word_id: int
    path: str
    frames: int


@dataclass
class SessionManifest:
    words: list[str]
    sessions: list[str]
    samples: list[SampleRecord]
    root: Path = Path(".")
    preprocessed: bool = False
    frame_rate_hz: float = 100.0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "format": "uwbf-manifest",
            "version": 1,
            "words": self.words,
            "sessions": self.sessions,
            "preprocessed": self.preprocessed,
            "frame_rate_hz": self.frame_rate_hz,
            "samples": [asdict(s) for s in self.samples],
            **self.extra,
        }

    def save(self, out_dir=None) -> Path:
        out = Path(out_dir or self.root) / MANIFEST_NAME
        out.write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")
        return out

    @classmethod
    def load(cls, data_dir) -> "SessionManifest":
        root = Path(data_dir)
        path = root / MANIFEST_NAME
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            samples = [SampleRecord(**s) for s in doc["samples"]]
            extra = {k: v for k, v in doc.items() if k not in
                     {"format", "version", "words", "sessions", "preprocessed", "frame_rate_hz", "samples"}}
            return cls(list(doc["words"]), list(doc["sessions"]), samples, root,
                       bool(doc.get("preprocessed", False)), float(doc.get("frame_rate_hz", 100.0)),
                       extra)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FrameSetFormatError(f"{path}: malformed manifest ({exc})") from exc

    def path_of(self, rec: SampleRecord) -> Path:
        return self.root / rec.path


def load_dataset(data_dir, clutter: Optional[ClutterConfig] = None) -> tuple[SessionManifest, list[PreprocFrameSet]]:
    """Load every sample as a network-ready frame set.

    Raw (256-bin) datasets are preprocessed on the fly.
    """
    manifest = SessionManifest.load(data_dir)
    out = []
    for rec in manifest.samples:
        fs = load_frameset(manifest.path_of(rec))
        if manifest.preprocessed:
            # float32 storage leaves row means around 1e-9; re-centre
            item = PreprocFrameSet(remove_dc(fs.frames), rec.word_id, rec.session)
        else:
            item = preprocess(fs, clutter, word=rec.word_id, session=rec.session)
        out.append(item)
    return manifest, out


def preprocess_dataset(src_dir, out_dir, clutter: Optional[ClutterConfig] = None) -> SessionManifest:
    src = SessionManifest.load(src_dir)
    if src.preprocessed:
        raise ValueError(f"{src_dir} is already preprocessed")
    out_dir = Path(out_dir)
    for rec in src.samples:
        raw = load_frameset(src.path_of(rec))
        pp = preprocess(raw, clutter)
        save_frameset(RawFrameSet(pp.frames, raw.frame_rate_hz), out_dir / rec.path)
    alpha = (clutter or ClutterConfig()).alpha
    dst = SessionManifest(src.words, src.sessions, src.samples, out_dir, True,
                          src.frame_rate_hz, {**src.extra, "clutter_alpha": alpha})
    dst.save()
    return dst


# -- synthetic generator -------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs of the synthetic stand-in for the recorded corpus.

    Jitter terms are standard deviations.  ``shift_jitter`` is in fast-time
    bins and ``clutter_amplitude`` is the L2 norm of each session's static
    background profile.
    """

    n_words: int = 50
    n_sessions: int = 20
    frames_min: int = 80
    frames_max: int = 160
    n_reflectors: int = 3
    amp_jitter: float = 0.1
    shift_jitter: float = 1.0
    time_jitter: float = 0.03
    noise_std: float = 0.05
    clutter_amplitude: float = 20.0
    frame_rate_hz: float = 100.0
    n_fast: int = N_FAST
    seed: int = 0

    def __post_init__(self):
        if self.n_words < 1 or self.n_sessions < 1:
            raise ValueError("n_words and n_sessions must be positive")
        if self.frames_min < 8 or self.frames_max < self.frames_min:
            raise ValueError(f"need 8 <= frames_min <= frames_max, got {self.frames_min}..{self.frames_max}")
        if self.n_reflectors < 1:
            raise ValueError("n_reflectors must be positive")
        for name in ("amp_jitter", "shift_jitter", "time_jitter", "noise_std", "clutter_amplitude"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_fast < 100:
            raise ValueError("n_fast must cover the 100 selected bins")


def word_names(n: int) -> list[str]:
    return [f"w{i:02d}" for i in range(n)]


def session_names(n: int) -> list[str]:
    return [f"s{i + 1:02d}" for i in range(n)]


_WORD, _SESSION, _SAMPLE = 0, 1, 2


def _word_template(cfg: SynthConfig, word: int) -> list[dict]:
    rng = np.random.default_rng([cfg.seed, _WORD, word])
    refl = []
    for _ in range(cfg.n_reflectors):
        n_comp = int(rng.integers(2, 5))
        refl.append({
            "center": rng.uniform(15.0, 85.0),
            "width": rng.uniform(2.0, 5.0),
            "amp": rng.uniform(0.5, 1.5),
            "traj_amp": rng.uniform(1.0, 6.0, n_comp),
            "traj_freq": rng.uniform(0.5, 3.0, n_comp),
            "traj_phase": rng.uniform(0, 2 * np.pi, n_comp),
            "env_freq": rng.uniform(0.5, 2.0),
            "env_phase": rng.uniform(0, 2 * np.pi),
        })
    return refl


def _session_params(cfg: SynthConfig, session: int) -> dict:
    rng = np.random.default_rng([cfg.seed, _SESSION, session])
    bins = np.arange(cfg.n_fast)
    profile = np.zeros(cfg.n_fast)
    for _ in range(6):
        profile += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((bins - rng.uniform(0, cfg.n_fast))
                                                         / rng.uniform(5, 40)) ** 2)
    profile += rng.uniform(0.0, 0.3, cfg.n_fast)
    norm = np.linalg.norm(profile)
    return {
        "scale": 1.0 + cfg.amp_jitter * rng.standard_normal(),
        "shift": cfg.shift_jitter * rng.standard_normal(),
        "clutter": profile * (cfg.clutter_amplitude / norm if norm > 0 else 0.0),
    }


def synth_frameset(cfg: SynthConfig, session: int, word: int) -> RawFrameSet:
    """One utterance of ``word`` in ``session``; deterministic in (seed, session, word)."""
    template = _word_template(cfg, word)
    sess = _session_params(cfg, session)
    rng = np.random.default_rng([cfg.seed, _SAMPLE, session, word])
    m = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
    # utterance-length resampling: the template lives on normalized time u in [0, 1]
    u = np.linspace(0.0, 1.0, m)
    u = np.clip(u + cfg.time_jitter * np.sin(np.pi * u) * rng.standard_normal(), 0.0, 1.0)
    bins = np.arange(cfg.n_fast)[None, :]
    frames = np.zeros((m, cfg.n_fast))
    for r in template:
        center = r["center"] + sess["shift"] + (
            r["traj_amp"][None, :] * np.sin(2 * np.pi * r["traj_freq"][None, :] * u[:, None]
                                            + r["traj_phase"][None, :])).sum(axis=1)
        amp = r["amp"] * sess["scale"] * (1.0 + 0.5 * np.sin(2 * np.pi * r["env_freq"] * u + r["env_phase"]))
        frames += amp[:, None] * np.exp(-0.5 * ((bins - center[:, None]) / r["width"]) ** 2)
    frames += sess["clutter"][None, :]
    frames += cfg.noise_std * rng.standard_normal(frames.shape)
    return RawFrameSet(frames, cfg.frame_rate_hz)


def _generate_one(args) -> int:
    cfg, out_dir, si, wi, rel = args
    fs = synth_frameset(cfg, si, wi)
    save_frameset(fs, Path(out_dir) / rel)
    return fs.n_frames


def generate_dataset(cfg: SynthConfig, out_dir, workers: int = 1) -> SessionManifest:
    """Write one raw frame set per (session, word) plus ``manifest.json``."""
    out_dir = Path(out_dir)
    words, sessions = word_names(cfg.n_words), session_names(cfg.n_sessions)
    jobs = [(cfg, str(out_dir), si, wi, f"sessions/{sid}/{w}.uwbf")
            for si, sid in enumerate(sessions) for wi, w in enumerate(words)]
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            lengths = list(pool.map(_generate_one, jobs, chunksize=16))
    else:
        lengths = [_generate_one(j) for j in jobs]
    samples = [SampleRecord(sessions[si], words[wi], wi, rel, m)
               for (_, _, si, wi, rel), m in zip(jobs, lengths)]
    manifest = SessionManifest(words, sessions, samples, out_dir, False, cfg.frame_rate_hz,
                               {"synth_config": asdict(cfg)})
    manifest.save()
    return manifest


def synth_preprocessed(cfg: SynthConfig, clutter: Optional[ClutterConfig] = None) -> list[PreprocFrameSet]:
    """In-memory equivalent of generate + load_dataset, without touching disk.

    Frames go through the same float32 storage rounding as the file path.
    """
    sessions = session_names(cfg.n_sessions)
    out = []
    for si, sid in enumerate(sessions):
        for wi in range(cfg.n_words):
            raw = synth_frameset(cfg, si, wi)
            raw = RawFrameSet(raw.frames.astype(np.float32).astype(np.float64), raw.frame_rate_hz)
            out.append(preprocess(raw, clutter, word=wi, session=sid))
    return out


# -- batching ------------------------------------------------------------------

@dataclass
class Batch:
    inputs: Tensor
    mask: TemporalMask
    labels: np.ndarray

    def __len__(self) -> int:
        return self.labels.size


def collate(samples: Sequence[PreprocFrameSet | np.ndarray], labels: Optional[Sequence[int]] = None,
            max_len: Optional[int] = None) -> Batch:
    """Zero-pad to a common length and transpose to channels-first ``B x F x M``."""
    if len(samples) == 0:
        raise ValueError("cannot collate an empty batch")
    frames = [s.frames if isinstance(s, PreprocFrameSet) else np.asarray(s, dtype=np.float64)
              for s in samples]
    feats = {f.shape[1] for f in frames}
    if len(feats) != 1:
        raise ValueError(f"samples disagree on fast-time extent: {sorted(feats)}")
    if labels is None:
        labels = [s.word if isinstance(s, PreprocFrameSet) and s.word is not None else -1
                  for s in samples]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size != len(frames):
        raise ValueError(f"{len(frames)} samples but {labels.size} labels")
    lengths = np.array([f.shape[0] for f in frames])
    m_max = int(lengths.max()) if max_len is None else max_len
    if m_max < lengths.max():
        raise ValueError(f"max_len {m_max} shorter than longest sample {lengths.max()}")
    x = np.zeros((len(frames), feats.pop(), m_max))
    for i, f in enumerate(frames):
        x[i, :, :f.shape[0]] = f.T
    return Batch(Tensor(x), TemporalMask(lengths, m_max), labels)


def iter_batches(samples: Sequence[PreprocFrameSet], batch_size: int,
                 rng: Optional[np.random.Generator] = None, drop_singleton: bool = False):
    """Yield collated batches, shuffled when ``rng`` is given.

    With ``drop_singleton`` a trailing batch of one sample is skipped, since
    batch statistics are undefined for it.
    """
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if drop_singleton and idx.size == 1 and len(order) > 1:
            continue
        yield collate([samples[i] for i in idx])


def dataset_checksum(samples: Sequence[PreprocFrameSet]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.ascontiguousarray(s.frames).tobytes())
        h.update(str((s.word, s.session)).encode())
    return h.hexdigest()
