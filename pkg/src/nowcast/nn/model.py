"""Model assemblies: encoder-forecaster predictor, hourly attention chain,
dense rain-map discriminator, and the checkpoint container.

Architecture: the encoder runs each input frame through [conv, ConvGRU]
three times with a /1, /2, /4 spatial pyramid; the forecaster unrolls one
step per future hour from deep to shallow with transposed-conv upsampling
between stages; the output head is a 1x1 conv clamped at zero (rain is
non-negative).  The attention net rescales each hour's map by twice a
sigmoid, so a zero-initialized stack is exactly the identity, and chains
its output into the next hour.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from ..errors import CheckpointVersionMismatch, ShapeMismatch
from ..grids import NormStats
from .convgru import ConvGRUCell
from .layers import (
    Conv2D,
    ConvTranspose2D,
    Dense,
    avg_pool,
    avg_pool_backward,
    leaky_relu,
    leaky_relu_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
)

ATTN_CHANNELS = (16, 32, 32, 32, 1)


@dataclass(frozen=True)
class NetConfig:
    """Shape and architecture knobs; desk-scale defaults."""

    grid_h: int = 64
    grid_w: int = 64
    in_channels: int = 2
    enc_channels: tuple = (32, 64, 96)
    stride: int = 2
    gru_kernel: int = 3
    attn_kernel: int = 5
    attn_pad: int = 2
    leaky_slope: float = 0.01
    n_in: int = 6
    t_out: int = 3
    use_attention: bool = False
    head: str = "relu"               # relu (regression) | sigmoid (classifier)
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.enc_channels) != 3:
            raise ValueError("encoder/forecaster use exactly 3 stages")
        if self.grid_h % 4 or self.grid_w % 4:
            raise ValueError("grid size must be divisible by 4")
        if self.head not in ("relu", "sigmoid"):
            raise ValueError("head must be 'relu' or 'sigmoid'")
        object.__setattr__(self, "enc_channels", tuple(self.enc_channels))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["enc_channels"] = tuple(d["enc_channels"])
        return cls(**d)


def _collect(prefix, module_params, out):
    for k, v in module_params.items():
        out[f"{prefix}.{k}"] = v


class Encoder:
    """Three [conv + LeakyReLU, ConvGRU] stages over the input sequence."""

    def __init__(self, rng, cfg: NetConfig):
        dt = cfg.np_dtype
        ch = cfg.enc_channels
        ins = (cfg.in_channels, ch[0], ch[1])
        strides = (1, cfg.stride, cfg.stride)
        self.slope = cfg.leaky_slope
        self.convs = [Conv2D(rng, ins[i], ch[i], 3, strides[i], 1, dt) for i in range(3)]
        self.grus = [ConvGRUCell(rng, ch[i], ch[i], cfg.gru_kernel, dt) for i in range(3)]
        self.channels = ch

    def params(self):
        out = {}
        for i in range(3):
            _collect(f"enc.conv{i}", self.convs[i].params(), out)
            _collect(f"enc.gru{i}", self.grus[i].params(), out)
        return out

    def forward(self, frames):
        """frames [B, N, C, H, W] -> list of 3 final hidden states."""
        B, N = frames.shape[:2]
        seq = [np.ascontiguousarray(frames[:, t]) for t in range(N)]
        states = []
        caches = []
        for i in range(3):
            conv, gru = self.convs[i], self.grus[i]
            h = None
            outs = []
            stage_cache = []
            for x in seq:
                a, c_conv = conv.forward(x)
                e, c_act = leaky_relu(a, self.slope)
                if h is None:
                    h = np.zeros_like(e)
                h, c_gru = gru.step(e, h)
                outs.append(h)
                stage_cache.append((c_conv, c_act, c_gru))
            states.append(h)
            caches.append(stage_cache)
            seq = outs
        return states, caches

    def backward(self, dstates, caches):
        """dstates: grads w.r.t. the 3 final hidden states."""
        grads = {}
        dseq_above = None
        for i in reversed(range(3)):
            conv, gru = self.convs[i], self.grus[i]
            stage_cache = caches[i]
            n = len(stage_cache)
            dh = dstates[i]
            dseq_below = [None] * n
            for t in reversed(range(n)):
                dh_total = dh if dseq_above is None else dh + dseq_above[t]
                de, dh, g_gru = gru.step_backward(dh_total, stage_cache[t][2])
                for k, v in g_gru.items():
                    _acc(grads, f"enc.gru{i}.{k}", v)
                da = leaky_relu_backward(de, stage_cache[t][1], self.slope)
                dx, g_conv = conv.backward(da, stage_cache[t][0])
                for k, v in g_conv.items():
                    _acc(grads, f"enc.conv{i}.{k}", v)
                dseq_below[t] = dx
            dseq_above = dseq_below
        return grads


def _acc(grads, key, v):
    if key in grads:
        grads[key] += v
    else:
        grads[key] = v


class Forecaster:
    """Deep-to-shallow unroll, one step per future hour."""

    def __init__(self, rng, cfg: NetConfig):
        dt = cfg.np_dtype
        c1, c2, c3 = cfg.enc_channels
        self.t_out = cfg.t_out
        self.gru3 = ConvGRUCell(rng, 0, c3, cfg.gru_kernel, dt)
        self.up2 = ConvTranspose2D(rng, c3, c2, 4, cfg.stride, 1, dt)
        self.gru2 = ConvGRUCell(rng, c2, c2, cfg.gru_kernel, dt)
        self.up1 = ConvTranspose2D(rng, c2, c1, 4, cfg.stride, 1, dt)
        self.gru1 = ConvGRUCell(rng, c1, c1, cfg.gru_kernel, dt)
        self.head = Conv2D(rng, c1, 1, 1, 1, 0, dt)

    def params(self):
        out = {}
        _collect("fcst.gru3", self.gru3.params(), out)
        _collect("fcst.up2", self.up2.params(), out)
        _collect("fcst.gru2", self.gru2.params(), out)
        _collect("fcst.up1", self.up1.params(), out)
        _collect("fcst.gru1", self.gru1.params(), out)
        _collect("fcst.head", self.head.params(), out)
        return out

    def forward(self, states):
        """states [h1, h2, h3] from the encoder -> raw maps [B, T, H, W]."""
        h1, h2, h3 = states
        raws = []
        caches = []
        for _ in range(self.t_out):
            h3, c_g3 = self.gru3.step(None, h3)
            u2, c_u2 = self.up2.forward(h3)
            h2, c_g2 = self.gru2.step(u2, h2)
            u1, c_u1 = self.up1.forward(h2)
            h1, c_g1 = self.gru1.step(u1, h1)
            raw, c_hd = self.head.forward(h1)
            raws.append(raw[:, 0])
            caches.append((c_g3, c_u2, c_g2, c_u1, c_g1, c_hd))
        return np.stack(raws, axis=1), caches

    def backward(self, draws, caches):
        """draws [B, T, H, W] -> (grads, [dh1, dh2, dh3] w.r.t. initial states)."""
        grads = {}
        dh1 = dh2 = dh3 = 0.0
        for t in reversed(range(self.t_out)):
            c_g3, c_u2, c_g2, c_u1, c_g1, c_hd = caches[t]
            dh1_step, g = self.head.backward(draws[:, t][:, None], c_hd)
            for k, v in g.items():
                _acc(grads, f"fcst.head.{k}", v)
            dh1_total = dh1 + dh1_step
            du1, dh1, g = self.gru1.step_backward(dh1_total, c_g1)
            for k, v in g.items():
                _acc(grads, f"fcst.gru1.{k}", v)
            dh2_step, g = self.up1.backward(du1, c_u1)
            for k, v in g.items():
                _acc(grads, f"fcst.up1.{k}", v)
            dh2_total = dh2 + dh2_step
            du2, dh2, g = self.gru2.step_backward(dh2_total, c_g2)
            for k, v in g.items():
                _acc(grads, f"fcst.gru2.{k}", v)
            dh3_step, g = self.up2.backward(du2, c_u2)
            for k, v in g.items():
                _acc(grads, f"fcst.up2.{k}", v)
            dh3_total = dh3 + dh3_step
            _, dh3, g = self.gru3.step_backward(dh3_total, c_g3)
            for k, v in g.items():
                _acc(grads, f"fcst.gru3.{k}", v)
        return grads, [dh1, dh2, dh3]


class AttentionNet:
    """Recurrent per-hour attention: a_t = sigmoid(convs([a_prev, p_t])).

    The scaled prediction is p_t * 2 * a_t, so zero weights (sigmoid 0.5)
    leave the prediction untouched.
    """

    def __init__(self, rng, cfg: NetConfig):
        dt = cfg.np_dtype
        self.slope = cfg.leaky_slope
        chans = ATTN_CHANNELS
        ins = (2,) + chans[:-1]
        self.convs = [Conv2D(rng, ins[i], chans[i], cfg.attn_kernel, 1, cfg.attn_pad, dt)
                      for i in range(len(chans))]

    def params(self):
        out = {}
        for i, conv in enumerate(self.convs):
            _collect(f"attn.conv{i}", conv.params(), out)
        return out

    def step(self, a_prev, p):
        """a_prev, p: [B, 1, H, W] -> attention map in (0, 1)."""
        x = np.concatenate([a_prev, p], axis=1)
        caches = []
        h = x
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            h, c_conv = conv.forward(h)
            if i < last:
                h, c_act = leaky_relu(h, self.slope)
            else:
                c_act = None
            caches.append((c_conv, c_act))
        a, c_sig = sigmoid(h)
        return a, (caches, c_sig)

    def step_backward(self, da, cache):
        caches, c_sig = cache
        grads = {}
        dh = sigmoid_backward(da, c_sig)
        last = len(self.convs) - 1
        for i in reversed(range(len(self.convs))):
            c_conv, c_act = caches[i]
            if i < last:
                dh = leaky_relu_backward(dh, c_act, self.slope)
            dh, g = self.convs[i].backward(dh, c_conv)
            for k, v in g.items():
                _acc(grads, f"attn.conv{i}.{k}", v)
        da_prev = dh[:, 0:1]
        dp = dh[:, 1:2]
        return da_prev, dp, grads


class Predictor:
    """Encoder + forecaster (+ optional attention chain)."""

    def __init__(self, rng, cfg: NetConfig):
        self.cfg = cfg
        self.encoder = Encoder(rng, cfg)
        self.forecaster = Forecaster(rng, cfg)
        self.attention = AttentionNet(rng, cfg) if cfg.use_attention else None

    def params(self):
        out = {}
        out.update(self.encoder.params())
        out.update(self.forecaster.params())
        if self.attention is not None:
            out.update(self.attention.params())
        return out

    def forward(self, frames, last_rain):
        """frames [B, N, C, H, W] normalized; last_rain [B, H, W] normalized.

        Returns (predictions [B, T, H, W] in normalized units, attention
        maps or None, cache).
        """
        B, N, C, H, W = frames.shape
        cfg = self.cfg
        if C != cfg.in_channels or H % 4 or W % 4:
            raise ShapeMismatch(f"bad input shape {frames.shape}")
        states, enc_cache = self.encoder.forward(frames)
        raws, fc_cache = self.forecaster.forward(states)

        if cfg.head == "sigmoid":
            p, c_head = sigmoid(raws)
            cache = (enc_cache, fc_cache, c_head, None)
            return p, None, cache

        p, c_head = relu(raws)
        if self.attention is None:
            cache = (enc_cache, fc_cache, c_head, None)
            return p, None, cache

        a_prev, _ = sigmoid(last_rain[:, None])
        attn_cache = []
        preds = []
        attns = []
        for t in range(cfg.t_out):
            pt = p[:, t][:, None]
            a, c_att = self.attention.step(a_prev, pt)
            preds.append(pt[:, 0] * 2.0 * a[:, 0])
            attns.append(a[:, 0])
            attn_cache.append((a_prev, pt, a, c_att))
            a_prev = a
        cache = (enc_cache, fc_cache, c_head, attn_cache)
        return np.stack(preds, 1), np.stack(attns, 1), cache

    def backward(self, dpreds, cache):
        """dpreds [B, T, H, W] w.r.t. the (normalized) predictions -> grads."""
        enc_cache, fc_cache, c_head, attn_cache = cache
        grads = {}
        if self.cfg.head == "sigmoid":
            draws = sigmoid_backward(dpreds, c_head)
        elif attn_cache is None:
            draws = relu_backward(dpreds, c_head)
        else:
            dp = np.zeros_like(dpreds)
            da_next = None
            for t in reversed(range(self.cfg.t_out)):
                a_prev, pt, a, c_att = attn_cache[t]
                da = dpreds[:, t][:, None] * 2.0 * pt
                if da_next is not None:
                    da = da + da_next
                dp_t = dpreds[:, t] * 2.0 * a[:, 0]
                da_prev, dp_att, g = self.attention.step_backward(da, c_att)
                for k, v in g.items():
                    _acc(grads, k, v)
                dp[:, t] = dp_t + dp_att[:, 0]
                da_next = da_prev
            draws = relu_backward(dp, c_head)
        # encoder/forecaster/attention prefixes are disjoint, plain update is safe
        g_fc, dstates = self.forecaster.backward(draws, fc_cache)
        grads.update(g_fc)
        grads.update(self.encoder.backward(dstates, enc_cache))
        return grads


class Discriminator:
    """Dense real-vs-generated scorer over (optionally pooled) rain maps."""

    def __init__(self, rng, cfg: NetConfig, pool=None):
        dt = cfg.np_dtype
        if pool is None:
            pool = 1 if max(cfg.grid_h, cfg.grid_w) <= 64 else 8
        self.pool = pool
        self.slope = cfg.leaky_slope
        feats = (cfg.grid_h // pool) * (cfg.grid_w // pool)
        self.fc1 = Dense(rng, feats, 128, dt)
        self.fc2 = Dense(rng, 128, 128, dt)
        self.fc3 = Dense(rng, 128, 1, dt)

    def params(self):
        out = {}
        _collect("disc.fc1", self.fc1.params(), out)
        _collect("disc.fc2", self.fc2.params(), out)
        _collect("disc.fc3", self.fc3.params(), out)
        return out

    def forward(self, maps):
        """maps [B, H, W] normalized rain -> probability-real scores [B]."""
        x = maps[:, None]
        xp, pshape = avg_pool(x, self.pool)
        B = xp.shape[0]
        flat = xp.reshape(B, -1)
        a1, c1 = self.fc1.forward(flat)
        h1, l1 = leaky_relu(a1, self.slope)
        a2, c2 = self.fc2.forward(h1)
        h2, l2 = leaky_relu(a2, self.slope)
        a3, c3 = self.fc3.forward(h2)
        s, cs = sigmoid(a3)
        cache = (pshape, flat.shape, c1, l1, c2, l2, c3, cs)
        return s[:, 0], cache

    def backward(self, ds, cache):
        """ds [B] -> (dmaps [B, H, W], grads)."""
        pshape, flatshape, c1, l1, c2, l2, c3, cs = cache
        grads = {}
        da3 = sigmoid_backward(ds[:, None], cs)
        dh2, g = self.fc3.backward(da3, c3)
        _collect("disc.fc3", g, grads)
        da2 = leaky_relu_backward(dh2, l2, self.slope)
        dh1, g = self.fc2.backward(da2, c2)
        _collect("disc.fc2", g, grads)
        da1 = leaky_relu_backward(dh1, l1, self.slope)
        dflat, g = self.fc1.backward(da1, c1)
        _collect("disc.fc1", g, grads)
        B = flatshape[0]
        h, w = pshape[2] // self.pool, pshape[3] // self.pool
        dxp = dflat.reshape(B, 1, h, w)
        dx = avg_pool_backward(dxp, pshape, self.pool)
        return dx[:, 0], grads


# ---------------------------------------------------------------------------
# model state and checkpoints

@dataclass
class ModelState:
    """Everything needed to run or resume a model."""

    config: NetConfig
    predictor: Predictor
    discriminator: Discriminator | None
    stats: NormStats | None
    seed: int
    variant: str = "GRU+WMAE"

    def params(self):
        out = dict(self.predictor.params())
        if self.discriminator is not None:
            out.update(self.discriminator.params())
        return out

    def param_count(self):
        return sum(int(np.prod(v.shape)) for v in self.params().values())

    def check_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.params().values())


def build_model(config: NetConfig, seed: int, with_discriminator: bool,
                variant: str = "GRU+WMAE", stats: NormStats | None = None) -> ModelState:
    """Deterministic construction: one seed fixes every parameter."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    predictor = Predictor(rng, config)
    disc = Discriminator(rng, config) if with_discriminator else None
    return ModelState(config, predictor, disc, stats, seed, variant)


CKPT_MAGIC = b"NWCK"
CKPT_VERSION = 1
_DTYPES = {"<f4": 0, "<f8": 1}
_DTYPES_REV = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(state: ModelState, path, extra_meta=None):
    """Write a versioned, byte-deterministic container of named arrays.

    Layout: magic "NWCK", u32 version, u64 meta length + UTF-8 JSON meta,
    u32 array count, then per array (sorted by name): u16 name length,
    name, u8 dtype code (0=float32 LE, 1=float64 LE), u8 ndim, u32 dims,
    raw values.
    """
    meta = {
        "variant": state.variant,
        "seed": state.seed,
        "config": state.config.to_dict(),
        "stats": None if state.stats is None else
                 {"rain_q95": state.stats.rain_q95, "radar_q95": state.stats.radar_q95},
        "has_discriminator": state.discriminator is not None,
    }
    if extra_meta:
        meta.update(extra_meta)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()

    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
             struct.pack("<Q", len(meta_bytes)), meta_bytes]
    arrays = state.params()
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = arrays[name]
        dt = arr.dtype.newbyteorder("<").str
        code = _DTYPES[dt]
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[ModelState, dict]:
    """Rebuild a ModelState; returns (state, meta)."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointVersionMismatch(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointVersionMismatch(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack_from("<Q", raw, 8)
    off = 16
    meta = json.loads(raw[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4

    config = NetConfig.from_dict(meta["config"])
    stats = None
    if meta.get("stats"):
        stats = NormStats(meta["stats"]["rain_q95"], meta["stats"]["radar_q95"])
    state = build_model(config, meta["seed"], meta["has_discriminator"],
                        meta["variant"], stats)

    params = state.params()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dt = np.dtype(_DTYPES_REV[code])
        nbytes = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=off)
        off += nbytes
        if name not in params:
            raise CheckpointVersionMismatch(f"{path}: unexpected array {name!r}")
        if tuple(shape) != params[name].shape:
            raise CheckpointVersionMismatch(
                f"{path}: shape mismatch for {name}: {shape} vs {params[name].shape}")
        params[name][...] = arr.reshape(shape)
    return state, meta
