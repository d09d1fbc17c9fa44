"""Desk-scale fingerprint encoder trained with a contrastive objective.

The network is a stack of spatially separable convolutions (a strided 3x1
frequency convolution followed by a strided 1x3 time convolution, each with
layer norm and ELU) that maps a 256x32 log-mel patch to an ``h``-vector.  A projection head
splits that vector into ``D`` chunks, sends each chunk through its own
Linear-ELU-Linear block to get one scalar, and L2-normalises the result.

Forward and backward passes are written out by hand in numpy;
:func:`gradient_check` pins them against central finite differences.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import augment
from .dsp import (N_FRAMES, N_MELS, SAMPLE_RATE, AudioBuffer, SegmentRef, log_mel_batch,
                  passes_energy_gate, segment_matrix)

log = logging.getLogger(__name__)

LN_EPS = 1e-5


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = N_MELS
    n_frames: int = N_FRAMES
    channels: Tuple[int, ...] = (16, 32, 64, 128)
    freq_strides: Tuple[int, ...] = (4, 4, 2, 2)
    time_strides: Tuple[int, ...] = (2, 2, 2, 4)
    dim: int = 64
    hidden: int = 32

    def __post_init__(self):
        if not len(self.channels) == len(self.freq_strides) == len(self.time_strides):
            raise ValueError("channels and strides must have one entry per layer")
        if self.h % self.dim:
            raise ValueError(f"embedding dim {self.dim} must divide encoder width {self.h}")

    @property
    def out_hw(self) -> Tuple[int, int]:
        fh, tw = self.n_mels, self.n_frames
        for sf, st in zip(self.freq_strides, self.time_strides):
            fh, tw = -(-fh // sf), -(-tw // st)
        return fh, tw

    @property
    def h(self) -> int:
        fh, tw = self.out_hw
        return self.channels[-1] * fh * tw

    @property
    def sub_dim(self) -> int:
        return self.h // self.dim

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class EncoderParams:
    config: EncoderConfig
    weights: Dict[str, np.ndarray]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.weights.items()})

    def n_params(self) -> int:
        return int(sum(v.size for v in self.weights.values()))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, __config__=np.frombuffer(json.dumps(self.config.to_json()).encode(), dtype=np.uint8),
                     **self.weights)

    @classmethod
    def load(cls, path) -> "EncoderParams":
        with np.load(path) as z:
            cfg = EncoderConfig.from_json(json.loads(bytes(z["__config__"]).decode()))
            weights = {k: z[k].astype(np.float64) for k in z.files if k != "__config__"}
        return cls(cfg, weights)


@dataclass(frozen=True)
class TrainConfig:
    batch_pairs: int = 32
    temperature: float = 0.05
    epochs: int = 20
    steps_per_epoch: int = 16
    learning_rate: float = 3e-3
    lr_floor: float = 1e-7
    momentum: float = 0.9
    pipeline: str = "proposed"
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_pairs < 1:
            raise ValueError("batch_pairs must be >= 1")
        if self.pipeline not in augment.PIPELINES:
            raise ValueError(f"unknown augmentation pipeline {self.pipeline!r}")


def _layer_shapes(cfg: EncoderConfig):
    """Yield ``(name, kernel, stride, padding, c_in, c_out)`` for every convolution."""
    c_in = 1
    for i, (c, sf, st) in enumerate(zip(cfg.channels, cfg.freq_strides, cfg.time_strides)):
        yield f"conv{i}f", (3, 1), (sf, 1), (1, 0), c_in, c
        yield f"conv{i}t", (1, 3), (1, st), (0, 1), c, c
        c_in = c


def init_params(cfg: EncoderConfig = EncoderConfig(), seed: int = 0) -> EncoderParams:
    """Fan-in scaled uniform initialisation; layer-norm gains start at one."""
    rng = np.random.default_rng(seed)
    w: Dict[str, np.ndarray] = {}
    for name, (kh, kw), _, _, c_in, c_out in _layer_shapes(cfg):
        fan_in = c_in * kh * kw
        lim = math.sqrt(6.0 / fan_in)
        w[f"{name}.w"] = rng.uniform(-lim, lim, (c_out, c_in, kh, kw))
        w[f"{name}.b"] = np.zeros(c_out)
        w[f"{name}.g"] = np.ones(c_out)
        w[f"{name}.beta"] = np.zeros(c_out)
    D, s, k = cfg.dim, cfg.sub_dim, cfg.hidden
    w["proj.w1"] = rng.uniform(-1, 1, (D, s, k)) * math.sqrt(6.0 / s)
    w["proj.b1"] = np.zeros((D, k))
    w["proj.w2"] = rng.uniform(-1, 1, (D, k)) * math.sqrt(3.0 / k)
    w["proj.b2"] = np.zeros(D)
    return EncoderParams(cfg, w)


# ---------------------------------------------------------------- layers

def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x, y):
    return np.where(x > 0, 1.0, y + 1.0)


def _conv_forward(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride[0], ::stride[1]]  # B, C, Ho, Wo, kh, kw
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    out = cols @ w.reshape(O, -1).T + b
    return out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2), (cols, xp.shape)


def _conv_backward(dout, cache, w, stride, pad):
    cols, xp_shape = cache
    B, C, Hp, Wp = xp_shape
    O, _, kh, kw = w.shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, O)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride[0] * Ho:stride[0], j:j + stride[1] * Wo:stride[1]] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad[0]:Hp - pad[0], pad[1]:Wp - pad[1]]
    return dx, dw, db


def _ln_forward(x, g, beta):
    mu = x.mean(axis=(1, 2, 3), keepdims=True)
    var = x.var(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g[None, :, None, None] + beta[None, :, None, None], (xhat, inv)


def _ln_backward(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * g[None, :, None, None]
    n = xhat[0].size
    dx = inv / n * (n * dxhat - dxhat.sum(axis=(1, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(1, 2, 3), keepdims=True))
    return dx, dg, dbeta


def standardize_input(logmel: np.ndarray) -> np.ndarray:
    """Per-example zero mean / unit variance of the log-mel patch."""
    mu = logmel.mean(axis=(-2, -1), keepdims=True)
    sd = logmel.std(axis=(-2, -1), keepdims=True)
    return (logmel - mu) / (sd + 1e-5)


def forward_batch(x: np.ndarray, params: EncoderParams, keep_cache: bool = False):
    """``(B, 256, 32)`` log-mel batch -> ``(B, D)`` unit-norm embeddings."""
    cfg = params.config
    w = params.weights
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (cfg.n_mels, cfg.n_frames):
        raise ValueError(f"expected input of shape (*, {cfg.n_mels}, {cfg.n_frames}), got {x.shape}")
    a = standardize_input(x)[:, None]
    caches = []
    for name, _, stride, pad, _, _ in _layer_shapes(cfg):
        c, cc = _conv_forward(a, w[f"{name}.w"], w[f"{name}.b"], stride, pad)
        n, lc = _ln_forward(c, w[f"{name}.g"], w[f"{name}.beta"])
        a = _elu(n)
        if keep_cache:
            caches.append((name, stride, pad, cc, lc, n, a))
    B = a.shape[0]
    u = a.reshape(B, cfg.dim, cfg.sub_dim)
    pre = np.einsum("bds,dsk->bdk", u, w["proj.w1"]) + w["proj.b1"]
    hid = _elu(pre)
    o = np.einsum("bdk,dk->bd", hid, w["proj.w2"]) + w["proj.b2"]
    r = np.linalg.norm(o, axis=1, keepdims=True)
    if not np.all(np.isfinite(o)) or np.any(r == 0):
        raise FloatingPointError("non-finite or zero projection output; parameters are in a bad state")
    z = o / r
    if not keep_cache:
        return z
    return z, (caches, a.shape, u, pre, hid, z, r)


def backward_batch(dz: np.ndarray, cache, params: EncoderParams) -> Dict[str, np.ndarray]:
    cfg = params.config
    w = params.weights
    caches, a_shape, u, pre, hid, z, r = cache
    grads: Dict[str, np.ndarray] = {}
    do = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / r
    grads["proj.b2"] = do.sum(axis=0)
    grads["proj.w2"] = np.einsum("bd,bdk->dk", do, hid)
    dhid = do[:, :, None] * w["proj.w2"][None]
    dpre = dhid * _elu_grad(pre, hid)
    grads["proj.b1"] = dpre.sum(axis=0)
    grads["proj.w1"] = np.einsum("bds,bdk->dsk", u, dpre)
    da = np.einsum("bdk,dsk->bds", dpre, w["proj.w1"]).reshape(a_shape)
    for name, stride, pad, cc, lc, n, a in reversed(caches):
        dn = da * _elu_grad(n, a)
        dc, grads[f"{name}.g"], grads[f"{name}.beta"] = _ln_backward(dn, lc, w[f"{name}.g"])
        da, grads[f"{name}.w"], grads[f"{name}.b"] = _conv_backward(dc, cc, w[f"{name}.w"], stride, pad)
    return grads


def forward(spec, params: EncoderParams) -> np.ndarray:
    """Embed one spectrogram (a :class:`~afprint.dsp.Spectrogram` or 2-D array)."""
    values = getattr(spec, "values", spec)
    return forward_batch(np.asarray(values)[None], params)[0]


# ---------------------------------------------------------------- contrastive loss

def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def pair_loss(i: int, j: int, embeddings: np.ndarray, tau: float) -> float:
    """``-log softmax`` of the (i, j) similarity among all k != i."""
    _check_tau(tau)
    if i == j:
        raise ValueError("a positive pair needs two distinct rows")
    z = np.asarray(embeddings, dtype=np.float64)
    logits = z @ z[i] / tau
    others = np.delete(logits, i)
    m = others.max()
    return float(-(logits[j] - m) + np.log(np.exp(others - m).sum()))


def _positive_index(n2: int) -> np.ndarray:
    N = n2 // 2
    return np.concatenate([np.arange(N, 2 * N), np.arange(N)])


def batch_loss(embeddings: np.ndarray, tau: float, return_grad: bool = False):
    """Average of both directed pair losses over the ``N`` positive pairs.

    Rows ``k`` and ``N + k`` are positives.  With ``return_grad`` also returns
    ``dL/dZ``.
    """
    _check_tau(tau)
    z = np.asarray(embeddings, dtype=np.float64)
    n2 = z.shape[0]
    if n2 % 2:
        raise ValueError("batch must hold an even number of rows (N clean + N augmented)")
    pos = _positive_index(n2)
    s = z @ z.T / tau
    np.fill_diagonal(s, -np.inf)
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    denom = e.sum(axis=1, keepdims=True)
    rows = np.arange(n2)
    loss = float(np.mean(-(s[rows, pos] - m[:, 0]) + np.log(denom[:, 0])))
    if not return_grad:
        return loss
    p = e / denom
    p[rows, pos] -= 1.0
    gs = p / n2
    dz = (gs + gs.T) @ z / tau
    return loss, dz


# ---------------------------------------------------------------- gradient check

def loss_and_grads(params: EncoderParams, batch: np.ndarray, tau: float):
    z, cache = forward_batch(batch, params, keep_cache=True)
    loss, dz = batch_loss(z, tau, return_grad=True)
    return loss, backward_batch(dz, cache, params)


def gradient_check(params: EncoderParams, batch: np.ndarray, tau: float, probe_count: int,
                   seed: int = 0, step: float = 1e-4, grad_scale: float = 1.0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``grad_scale`` multiplies the analytic gradient and exists to inject faults.
    Relative errors use ``max(|numeric|, 1e-3 * max|numeric|)`` as denominator
    so that near-zero components do not dominate.
    """
    if len(batch) > 8:
        raise ValueError("gradient checks are meant for 2N <= 8")
    if probe_count == 0:
        return 0.0
    _, grads = loss_and_grads(params, batch, tau)
    rng = np.random.default_rng(seed)
    names = sorted(params.weights)
    sizes = np.array([params.weights[n].size for n in names])
    flat_choice = rng.choice(sizes.sum(), size=probe_count, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    probe = params.copy()
    analytic, numeric = [], []
    for f in flat_choice:
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        name, idx = names[k], int(f - offsets[k])
        arr = probe.weights[name].reshape(-1)
        orig = arr[idx]
        arr[idx] = orig + step
        lp = batch_loss(forward_batch(batch, probe), tau)
        arr[idx] = orig - step
        lm = batch_loss(forward_batch(batch, probe), tau)
        arr[idx] = orig
        numeric.append((lp - lm) / (2 * step))
        analytic.append(grad_scale * grads[name].reshape(-1)[idx])
    a, n = np.array(analytic), np.array(numeric)
    floor = max(1e-3 * np.abs(n).max(), 1e-12)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(n), floor)))


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: EncoderParams
    loss_history: List[float] = field(default_factory=list)


@dataclass
class Batch:
    clean: np.ndarray       # (N, 8000) waveforms
    augmented: np.ndarray   # (N, 8000); row k is the distorted copy of clean row k
    provenance: List[Tuple[int, int]]  # (song index, start sample) per clean row


def _pick_start(song: AudioBuffer, n: int, margin: int, rng, tries: int = 8) -> int:
    hi = len(song) - n - margin
    lo = margin
    if hi <= lo:
        lo, hi = 0, max(0, len(song) - n)
    s = lo
    for _ in range(tries):
        s = int(rng.integers(lo, hi + 1))
        if passes_energy_gate(song.samples[s:s + n]):
            break
    return s


def make_batch(songs: Sequence[AudioBuffer], noise_pool, ir_pool, aug: augment.AugmentConfig,
               n_pairs: int, rng: np.random.Generator, pipeline: str = "proposed") -> Batch:
    """Sample 1 s fragments from ``n_pairs`` distinct songs and distort each one."""
    if len(songs) < n_pairs:
        raise ValueError(f"need at least {n_pairs} distinct songs per batch, have {len(songs)}")
    fn = augment.PIPELINES[pipeline]
    n = SAMPLE_RATE
    margin = int(round(aug.time_offset_max_s * SAMPLE_RATE))
    chosen = rng.choice(len(songs), size=n_pairs, replace=False)
    clean, distorted, prov = [], [], []
    for si in chosen:
        song = songs[int(si)]
        s = _pick_start(song, n, margin, rng)
        seg = song.slice(s, s + n)
        out = fn(seg, noise_pool, ir_pool, aug, rng, context=song, start=s)
        clean.append(seg.samples)
        distorted.append(out.samples)
        prov.append((int(si), s))
    return Batch(np.array(clean), np.array(distorted), prov)


def cosine_lr(step: int, total: int, lr0: float, floor: float) -> float:
    if total <= 1:
        return lr0
    return floor + 0.5 * (lr0 - floor) * (1 + math.cos(math.pi * step / (total - 1)))


def train(songs: Sequence[AudioBuffer], noise_pool, ir_pool, aug: augment.AugmentConfig,
          cfg: TrainConfig, enc_cfg: EncoderConfig = EncoderConfig(),
          init: Optional[EncoderParams] = None,
          on_batch: Optional[Callable[[int, Batch, float], None]] = None) -> TrainResult:
    """Contrastive training: clean rows ``1..N``, their distortions ``N+1..2N``.

    SGD with momentum and a cosine-decayed learning rate.  Returns the final
    parameters and the mean training loss of every epoch.
    """
    if len(songs) < cfg.batch_pairs:
        raise ValueError(f"need at least {cfg.batch_pairs} songs, have {len(songs)}")
    params = init.copy() if init is not None else init_params(enc_cfg, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0x7452])
    velocity = {k: np.zeros_like(v) for k, v in params.weights.items()}
    total = cfg.epochs * cfg.steps_per_epoch
    history: List[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for _ in range(cfg.steps_per_epoch):
            batch = make_batch(songs, noise_pool, ir_pool, aug, cfg.batch_pairs, rng, cfg.pipeline)
            x = log_mel_batch(np.concatenate([batch.clean, batch.augmented]))
            loss, grads = loss_and_grads(params, x, cfg.temperature)
            if not math.isfinite(loss):
                raise FloatingPointError(f"loss diverged at epoch {epoch}, step {step}")
            lr = cosine_lr(step, total, cfg.learning_rate, cfg.lr_floor)
            for k, g in grads.items():
                v = velocity[k]
                v *= cfg.momentum
                v -= lr * g
                params.weights[k] += v
            if on_batch is not None:
                on_batch(step, batch, loss)
            losses.append(loss)
            step += 1
        history.append(float(np.mean(losses)))
        log.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, history[-1])
    return TrainResult(params, history)


# ---------------------------------------------------------------- inference

class EncoderEmbedder:
    """Callable mapping 1 s, 8 kHz waveforms ``(n, 8000)`` to ``(n, D)`` embeddings."""

    def __init__(self, params: EncoderParams, batch_size: int = 256):
        self.params = params
        self.batch_size = batch_size

    @property
    def dim(self) -> int:
        return self.params.config.dim

    def __call__(self, segments: np.ndarray) -> np.ndarray:
        segments = np.atleast_2d(np.asarray(segments, dtype=np.float64))
        out = np.empty((len(segments), self.dim))
        for i in range(0, len(segments), self.batch_size):
            x = log_mel_batch(segments[i:i + self.batch_size])
            out[i:i + self.batch_size] = forward_batch(x, self.params)
        return out

    def embed_audio(self, audio: AudioBuffer) -> np.ndarray:
        return self(segment_matrix(audio))


# ---------------------------------------------------------------- embedding exchange

EMB_MAGIC = b"AFPE"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sHIQ")


class EmbeddingFileError(ValueError):
    pass


def export_embeddings(path, refs: Sequence[SegmentRef], embeddings: np.ndarray) -> None:
    """Write the binary row file plus a ``.json`` sidecar of segment refs."""
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    if emb.ndim != 2 or len(emb) != len(refs):
        raise ValueError("embeddings must be (rows, D) and aligned with refs")
    path = Path(path)
    path.write_bytes(_EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, emb.shape[1], emb.shape[0]) + emb.tobytes())
    sidecar = [{"song_id": r.song_id, "segment_index": r.segment_index} for r in refs]
    Path(str(path) + ".json").write_text(json.dumps(sidecar))


def import_embeddings(path, expected_dim: Optional[int] = None,
                      tolerance: float = 1e-3) -> List[Tuple[SegmentRef, np.ndarray]]:
    """Read an embedding-exchange file; rows off unit norm by > ``tolerance`` are rejected."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _EMB_HEADER.size:
        raise EmbeddingFileError(f"{path}: truncated header")
    magic, version, dim, rows = _EMB_HEADER.unpack_from(data, 0)
    if magic != EMB_MAGIC:
        raise EmbeddingFileError(f"{path}: bad magic {magic!r}")
    if version != EMB_VERSION:
        raise EmbeddingFileError(f"{path}: unsupported version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise EmbeddingFileError(f"{path}: dimension {dim} != expected {expected_dim}")
    body = data[_EMB_HEADER.size:]
    if len(body) != rows * dim * 4:
        raise EmbeddingFileError(f"{path}: expected {rows}x{dim} float32 rows")
    emb = np.frombuffer(body, dtype="<f4").reshape(rows, dim)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    if len(sidecar) != rows:
        raise EmbeddingFileError(f"{path}: sidecar has {len(sidecar)} refs for {rows} rows")
    out = []
    for i, (row, meta) in enumerate(zip(emb, sidecar)):
        if not np.all(np.isfinite(row)):
            raise EmbeddingFileError(f"{path}: row {i} is not finite")
        norm = float(np.linalg.norm(row.astype(np.float64)))
        if abs(norm - 1.0) > tolerance:
            raise EmbeddingFileError(f"{path}: row {i} has norm {norm:.4f}, not unit within {tolerance}")
        if norm != 1.0 and abs(norm - 1.0) > 1e-6:
            row = (row / norm).astype("<f4")
        out.append((SegmentRef(int(meta["song_id"]), int(meta["segment_index"])), row.copy()))
    return out
