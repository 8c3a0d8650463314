"""Attention-enhanced temporal convolutional network.

Layout of the network::

    x (B x 100 x M)
      -> input layer: Conv1D(k=3) -> BN -> ReLU                      (C_0)
      -> enhanced block i = 1..L, dilation 2**(i-1):
             f   = DCBlock(DCBlock(h))        DCBlock = conv -> BN -> ReLU -> dropout
             a   = gamma * Attention(f) + f   single head over time, d_k = C_i / 8
             s   = a * sigmoid(FC2(ReLU(FC1(GAP(a)))))
             h   = ReLU(s + Residual(h))      residual is a 1x1 conv when C changes
      -> head: GAP -> FC(C_L, 256) -> BN -> ReLU -> dropout -> FC(256, W)

Padded time steps are re-zeroed after every layer that could make them
non-zero, so convolutions at sequence edges always see zero padding and all
statistics are computed over valid steps only.

Checkpoint layout (little-endian)::

    b"UWBC"  u16 version=1  u16 reserved=0  u32 meta_len  meta (UTF-8 JSON config)
    u32 count, then per tensor:
        u16 name_len, name (UTF-8), u8 ndim, u32 dims[ndim], f64 data (row-major)

Tensor names, for level ``i`` in ``0..L-1``::

    input.conv.weight / .bias, input.bn.scale / .shift / .running_mean / .running_var
    blocks.{i}.dc{1,2}.conv.weight / .bias, blocks.{i}.dc{1,2}.bn.{scale,shift,running_mean,running_var}
    blocks.{i}.attn.w_q / .w_k / .w_v / .gamma
    blocks.{i}.se.fc1.weight / .bias, blocks.{i}.se.fc2.weight / .bias
    blocks.{i}.residual.weight / .bias          (only when C_{i} != C_{i+1})
    head.fc1.weight / .bias, head.bn.{scale,shift,running_mean,running_var}, head.fc2.weight / .bias
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import BatchNormStats, TemporalMask, Tensor


@dataclass
class ModelConfig:
    channels: tuple = (64, 96, 128, 256, 384, 512)
    kernel_size: int = 3
    dropout: float = 0.25
    se_reduction: int = 16
    dk_divisor: int = 8
    n_classes: int = 50
    head_hidden: int = 256
    in_channels: int = 100
    dilations: Optional[tuple] = None
    use_attention: bool = True
    use_batchnorm: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 2:
            raise ValueError("channels needs the input-layer width plus at least one block")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channel ladder must be strictly increasing, got {self.channels}")
        expected = tuple(2 ** i for i in range(self.n_levels))
        if self.dilations is None:
            self.dilations = expected
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.dilations != expected:
            raise ValueError(f"dilations must be 2**(i-1) per level, i.e. {expected}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        for c in self.channels[1:]:
            if c % self.dk_divisor:
                raise ValueError(f"block width {c} not divisible by dk_divisor={self.dk_divisor}")
            if c % self.se_reduction:
                raise ValueError(f"block width {c} not divisible by se_reduction={self.se_reduction}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.n_classes < 2 or self.head_hidden < 1 or self.in_channels < 1:
            raise ValueError("n_classes >= 2, head_hidden >= 1 and in_channels >= 1 required")

    @property
    def n_levels(self) -> int:
        return len(self.channels) - 1

    def receptive_field(self) -> int:
        """Analytic temporal span of the convolution stack."""
        half = (self.kernel_size - 1) // 2
        return 1 + 2 * half + sum(2 * 2 * half * d for d in self.dilations)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["dilations"] = list(self.dilations)
        return d


class AttentionTCN:
    """Parameters, running statistics and forward pass of the network.

    ``params`` maps names to learnable :class:`Tensor` leaves; ``buffers``
    maps batch-norm prefixes to their :class:`BatchNormStats`.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int | np.random.Generator = 0):
        self.config = config or ModelConfig()
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, BatchNormStats] = {}
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._init_params(rng)

    # -- construction ----------------------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _uniform(self, rng, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def _conv(self, rng, prefix, c_in, c_out, k):
        fan_in = c_in * k
        self._add(f"{prefix}.weight", self._uniform(rng, (c_out, c_in, k), fan_in))
        self._add(f"{prefix}.bias", self._uniform(rng, (c_out,), fan_in))

    def _affine(self, rng, prefix, f_in, f_out):
        self._add(f"{prefix}.weight", self._uniform(rng, (f_out, f_in), f_in))
        self._add(f"{prefix}.bias", self._uniform(rng, (f_out,), f_in))

    def _bn(self, prefix, c):
        cfg = self.config
        self._add(f"{prefix}.scale", np.ones(c))
        self._add(f"{prefix}.shift", np.zeros(c))
        self.buffers[prefix] = BatchNormStats.create(c, cfg.bn_momentum, cfg.bn_eps)

    def _init_params(self, rng) -> None:
        cfg = self.config
        k = cfg.kernel_size
        ch = cfg.channels
        self._conv(rng, "input.conv", cfg.in_channels, ch[0], k)
        self._bn("input.bn", ch[0])
        for i in range(cfg.n_levels):
            c_in, c_out = ch[i], ch[i + 1]
            p = f"blocks.{i}"
            self._conv(rng, f"{p}.dc1.conv", c_in, c_out, k)
            self._bn(f"{p}.dc1.bn", c_out)
            self._conv(rng, f"{p}.dc2.conv", c_out, c_out, k)
            self._bn(f"{p}.dc2.bn", c_out)
            dk = c_out // cfg.dk_divisor
            self._add(f"{p}.attn.w_q", self._uniform(rng, (c_out, dk), c_out))
            self._add(f"{p}.attn.w_k", self._uniform(rng, (c_out, dk), c_out))
            self._add(f"{p}.attn.w_v", self._uniform(rng, (c_out, c_out), c_out))
            self._add(f"{p}.attn.gamma", np.zeros(1))
            hidden = c_out // cfg.se_reduction
            self._affine(rng, f"{p}.se.fc1", c_out, hidden)
            self._affine(rng, f"{p}.se.fc2", hidden, c_out)
            if c_in != c_out:
                self._conv(rng, f"{p}.residual", c_in, c_out, 1)
        self._affine(rng, "head.fc1", ch[-1], cfg.head_hidden)
        self._bn("head.bn", cfg.head_hidden)
        self._affine(rng, "head.fc2", cfg.head_hidden, cfg.n_classes)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- layers ----------------------------------------------------------------

    def _norm(self, x: Tensor, prefix: str, training: bool, mask: Optional[TemporalMask]) -> Tensor:
        if not self.config.use_batchnorm:
            return x
        p = self.params
        return T.batch_norm1d(x, p[f"{prefix}.scale"], p[f"{prefix}.shift"], self.buffers[prefix],
                              training, mask)

    @staticmethod
    def _rezero(x: Tensor, mask: TemporalMask) -> Tensor:
        if mask.valid_len.min() == mask.max_len:
            return x
        return T.mul(x, Tensor(mask.weights()))

    def input_layer(self, x: Tensor, mask: TemporalMask, training: bool = False) -> Tensor:
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"input must be B x {cfg.in_channels} x M, got {x.shape}")
        p = self.params
        x = self._rezero(x, mask)
        h = T.conv1d(x, p["input.conv.weight"], p["input.conv.bias"], dilation=1)
        h = T.relu(self._norm(h, "input.bn", training, mask))
        return self._rezero(h, mask)

    def dcblock(self, x: Tensor, prefix: str, dilation: int, mask: TemporalMask,
                training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        p = self.params
        h = T.conv1d(x, p[f"{prefix}.conv.weight"], p[f"{prefix}.conv.bias"], dilation=dilation)
        h = T.relu(self._norm(h, f"{prefix}.bn", training, mask))
        h = T.dropout(h, self.config.dropout, training, rng)
        return self._rezero(h, mask)

    def tcn_features(self, h: Tensor, level: int, mask: TemporalMask, training: bool = False,
                     rng: Optional[np.random.Generator] = None) -> Tensor:
        d = self.config.dilations[level]
        f = self.dcblock(h, f"blocks.{level}.dc1", d, mask, training, rng)
        return self.dcblock(f, f"blocks.{level}.dc2", d, mask, training, rng)

    def attention_weights(self, f: Tensor, level: int, mask: TemporalMask) -> Tensor:
        """Row-stochastic ``B x M x M`` weights; padded keys get zero weight."""
        p = self.params
        pre = f"blocks.{level}.attn"
        ft = T.transpose(f, (0, 2, 1))
        q = ft @ p[f"{pre}.w_q"]
        k = ft @ p[f"{pre}.w_k"]
        dk = p[f"{pre}.w_q"].shape[1]
        scores = (q @ T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dk))
        return T.softmax(scores, axis=-1, mask=mask.bool()[:, None, :])

    def self_attention(self, f: Tensor, level: int, mask: TemporalMask) -> Tensor:
        p = self.params
        pre = f"blocks.{level}.attn"
        a = self.attention_weights(f, level, mask)
        v = T.transpose(f, (0, 2, 1)) @ p[f"{pre}.w_v"]
        attended = T.transpose(a @ v, (0, 2, 1))
        return p[f"{pre}.gamma"] * attended + f

    def se_scales(self, x: Tensor, level: int, mask: TemporalMask) -> Tensor:
        p = self.params
        pre = f"blocks.{level}.se"
        z = T.masked_global_avg_pool(x, mask)
        z = T.relu(T.linear(z, p[f"{pre}.fc1.weight"], p[f"{pre}.fc1.bias"]))
        return T.sigmoid(T.linear(z, p[f"{pre}.fc2.weight"], p[f"{pre}.fc2.bias"]))

    def se_block(self, x: Tensor, level: int, mask: TemporalMask) -> Tensor:
        s = self.se_scales(x, level, mask)
        return x * T.reshape(s, s.shape + (1,))

    def residual(self, h: Tensor, level: int) -> Tensor:
        name = f"blocks.{level}.residual"
        if f"{name}.weight" not in self.params:
            return h
        return T.conv1d(h, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def enhanced_block(self, h: Tensor, level: int, mask: TemporalMask, training: bool = False,
                       rng: Optional[np.random.Generator] = None) -> Tensor:
        f = self.tcn_features(h, level, mask, training, rng)
        if self.config.use_attention:
            f = self.self_attention(f, level, mask)
        out = T.relu(self.se_block(f, level, mask) + self.residual(h, level))
        return self._rezero(out, mask)

    def classify(self, h: Tensor, mask: TemporalMask, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        cfg = self.config
        if h.shape[1] != cfg.channels[-1]:
            raise ValueError(f"head expects {cfg.channels[-1]} channels, got {h.shape[1]}")
        p = self.params
        z = T.masked_global_avg_pool(h, mask)
        z = T.linear(z, p["head.fc1.weight"], p["head.fc1.bias"])
        z = T.relu(self._norm(z, "head.bn", training, None))
        z = T.dropout(z, cfg.dropout, training, rng)
        return T.linear(z, p["head.fc2.weight"], p["head.fc2.bias"])

    def features(self, x: Tensor, mask: TemporalMask, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        """Output of the last enhanced block, ``B x C_L x M``."""
        h = self.input_layer(x, mask, training)
        for level in range(self.config.n_levels):
            h = self.enhanced_block(h, level, mask, training, rng)
        return h

    def forward(self, x: Tensor, mask: Optional[TemporalMask] = None, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Logits ``B x W``.  Dropout in training mode draws from ``rng``."""
        if mask is None:
            mask = TemporalMask.full(x.shape[0], x.shape[2])
        return self.classify(self.features(x, mask, training, rng), mask, training, rng)

    __call__ = forward

    # -- bookkeeping -----------------------------------------------------------

    def param_count(self) -> dict[str, int]:
        """Learnable scalar counts per component plus ``"total"``."""
        counts: dict[str, int] = {}
        for name, t in self.params.items():
            parts = name.split(".")
            key = ".".join(parts[:3]) if parts[0] == "blocks" else ".".join(parts[:2])
            counts[key] = counts.get(key, 0) + t.data.size
        counts["total"] = sum(t.data.size for t in self.params.values())
        return counts

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.params.items()}
        for prefix, st in self.buffers.items():
            state[f"{prefix}.running_mean"] = st.mean.copy()
            state[f"{prefix}.running_var"] = st.var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing, unknown = expected - set(state), set(state) - expected
        if missing or unknown:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unknown {sorted(unknown)[:5]}")
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)
        for prefix, st in self.buffers.items():
            st.mean = np.array(state[f"{prefix}.running_mean"], dtype=np.float64)
            st.var = np.array(state[f"{prefix}.running_var"], dtype=np.float64)


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"UWBC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: AttentionTCN, path, extra: Optional[dict] = None) -> None:
    meta = json.dumps({"model_config": model.config.to_dict(), **(extra or {})}).encode()
    chunks = [CKPT_MAGIC, struct.pack("<HHI", CKPT_VERSION, 0, len(meta)), meta]
    state = model.state_dict()
    chunks.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, _, meta_len = struct.unpack("<HHI", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(take(meta_len).decode())
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return meta, state


def load_checkpoint(path) -> tuple[AttentionTCN, dict]:
    meta, state = read_checkpoint(path)
    cfg = dict(meta["model_config"])
    model = AttentionTCN(ModelConfig(**cfg))
    model.load_state_dict(state)
    return model, meta
