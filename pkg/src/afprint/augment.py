"""Distortion model: noise mixing, reverberation, roll-off filters and the two pipelines.

The baseline pipeline is time offset -> impulse response -> background noise.
The proposed pipeline appends a random low/high-pass roll-off filter to it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sp_fft, signal

from .dsp import AudioBuffer, load_wav, to_mono_8k

LOW_PASS = "low_pass"
HIGH_PASS = "high_pass"
ROLLOFFS_DB = (12, 24, 36)
CUTOFF_RANGES = {LOW_PASS: (2000.0, 3000.0), HIGH_PASS: (500.0, 1000.0)}


@dataclass(frozen=True)
class FilterSpec:
    kind: str
    cutoff_hz: float
    rolloff_db: int

    def __post_init__(self):
        if self.kind not in CUTOFF_RANGES:
            raise ValueError(f"filter kind must be {LOW_PASS!r} or {HIGH_PASS!r}, got {self.kind!r}")
        lo, hi = CUTOFF_RANGES[self.kind]
        if not lo <= self.cutoff_hz <= hi:
            raise ValueError(f"{self.kind} cutoff {self.cutoff_hz} Hz outside [{lo}, {hi}]")
        if self.rolloff_db not in ROLLOFFS_DB:
            raise ValueError(f"roll-off must be one of {ROLLOFFS_DB} dB/octave")

    @property
    def order(self) -> int:
        return self.rolloff_db // 6


@dataclass(frozen=True)
class AugmentConfig:
    snr_db_range: Tuple[float, float] = (0.0, 10.0)
    ir_probability: float = 0.5
    filter_probability: float = 0.4
    time_offset_max_s: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("ir_probability", "filter_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.snr_db_range
        if lo > hi:
            raise ValueError(f"empty SNR range {self.snr_db_range}")
        if self.time_offset_max_s < 0:
            raise ValueError("time_offset_max_s must be non-negative")

    @property
    def noise_enabled(self) -> bool:
        return not np.isposinf(self.snr_db_range[0])


# ---------------------------------------------------------------- primitives

def _power(x: np.ndarray) -> float:
    return float(np.mean(x * x))


def fit_noise(noise: np.ndarray, n: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Crop (at a seeded offset) or wrap ``noise`` to exactly ``n`` samples."""
    if len(noise) >= n:
        start = 0 if rng is None or len(noise) == n else int(rng.integers(0, len(noise) - n + 1))
        return noise[start:start + n]
    reps = -(-n // len(noise))
    return np.tile(noise, reps)[:n]


def mix_at_snr(signal_: AudioBuffer, noise: AudioBuffer, snr_db: float,
               rng: Optional[np.random.Generator] = None) -> AudioBuffer:
    """Add ``noise`` scaled so that ``10*log10(P_signal / P_noise) == snr_db``."""
    if noise.sample_rate_hz != signal_.sample_rate_hz:
        raise ValueError("signal and noise sample rates differ")
    x = signal_.samples
    nz = fit_noise(noise.samples, len(x), rng)
    ps, pn = _power(x), _power(nz)
    if ps == 0.0 or pn == 0.0:
        raise ValueError("SNR undefined for an all-zero signal or noise")
    g = np.sqrt(ps / (pn * 10 ** (snr_db / 10)))
    return AudioBuffer(x + g * nz, signal_.sample_rate_hz)


def convolve_ir(signal_: AudioBuffer, ir: AudioBuffer) -> AudioBuffer:
    """Linear convolution truncated to the input length, renormalised to the input peak."""
    if ir.sample_rate_hz != signal_.sample_rate_hz:
        raise ValueError(f"IR at {ir.sample_rate_hz} Hz cannot be applied to {signal_.sample_rate_hz} Hz audio")
    if len(ir) == 0:
        raise ValueError("empty impulse response")
    x = signal_.samples
    y = signal.oaconvolve(x, ir.samples)[:len(x)]
    peak_in, peak_out = np.max(np.abs(x), initial=0.0), np.max(np.abs(y), initial=0.0)
    if peak_out > 0:
        y = y * (peak_in / peak_out)
    return AudioBuffer(y, signal_.sample_rate_hz)


def butterworth_gain(freqs_hz: np.ndarray, cutoff_hz: float, order: int, kind: str) -> np.ndarray:
    """Analog Butterworth magnitude; 6*order dB per octave outside the passband."""
    f = np.abs(np.asarray(freqs_hz, dtype=np.float64))
    if kind == LOW_PASS:
        ratio = f / cutoff_hz
    else:
        with np.errstate(divide="ignore"):
            ratio = np.where(f > 0, cutoff_hz / np.maximum(f, 1e-300), np.inf)
    return 1.0 / np.sqrt(1.0 + ratio ** (2 * order))


def shape_spectrum(x: np.ndarray, sample_rate_hz: int, cutoff_hz: float, order: int,
                   kind: str) -> np.ndarray:
    """Zero-phase filtering by multiplying the spectrum with a Butterworth magnitude.

    The analog response is used directly (no bilinear warping), so the
    attenuation in octave bands near Nyquist is what the roll-off promises.
    """
    if cutoff_hz >= sample_rate_hz / 2:
        raise ValueError(f"cutoff {cutoff_hz} Hz is at or above Nyquist ({sample_rate_hz / 2} Hz)")
    n = len(x)
    pad = min(n, 2048)  # keeps the circular wrap of the response tail out of the signal
    nfft = sp_fft.next_fast_len(n + pad, real=True)
    spec = np.fft.rfft(x, nfft)
    gain = butterworth_gain(np.fft.rfftfreq(nfft, 1.0 / sample_rate_hz), cutoff_hz, order, kind)
    return np.fft.irfft(spec * gain, nfft)[:n]


def apply_filter(signal_: AudioBuffer, spec: FilterSpec) -> AudioBuffer:
    y = shape_spectrum(signal_.samples, signal_.sample_rate_hz, spec.cutoff_hz, spec.order, spec.kind)
    return AudioBuffer(y, signal_.sample_rate_hz)


def sample_filter_spec(rng: np.random.Generator, filter_probability: float = 0.4) -> Optional[FilterSpec]:
    """One gate decides whether a filter is used at all; its parameters follow."""
    if rng.random() >= filter_probability:
        return None
    kind = (LOW_PASS, HIGH_PASS)[int(rng.integers(0, 2))]
    lo, hi = CUTOFF_RANGES[kind]
    cutoff = float(rng.uniform(lo, hi))
    rolloff = ROLLOFFS_DB[int(rng.integers(0, 3))]
    return FilterSpec(kind, cutoff, rolloff)


# ---------------------------------------------------------------- pipelines

def _shift(x: np.ndarray, d: int) -> np.ndarray:
    if d == 0:
        return x.copy()
    out = np.zeros_like(x)
    if d > 0:
        out[d:] = x[:-d]
    else:
        out[:d] = x[-d:]
    return out


def baseline_pipeline(segment: AudioBuffer, noise_pool: Sequence[AudioBuffer],
                      ir_pool: Sequence[AudioBuffer], cfg: AugmentConfig,
                      rng: np.random.Generator, context: Optional[AudioBuffer] = None,
                      start: Optional[int] = None) -> AudioBuffer:
    """Random time offset, then reverberation with ``cfg.ir_probability``, then noise.

    When ``context`` (the full song) and the segment's ``start`` sample are
    given, the offset window is re-cut from the song; otherwise the segment
    is shifted and zero-filled.
    """
    if not noise_pool or not ir_pool:
        raise ValueError("noise and IR pools must be non-empty")
    sr = segment.sample_rate_hz
    n = len(segment)
    max_off = int(round(cfg.time_offset_max_s * sr))
    d = int(rng.integers(-max_off, max_off + 1)) if max_off else 0
    if context is not None and start is not None:
        s = min(max(start + d, 0), len(context) - n)
        x = context.samples[s:s + n].copy()
    else:
        x = _shift(segment.samples, d)
    out = AudioBuffer(x, sr)

    if rng.random() < cfg.ir_probability:
        out = convolve_ir(out, ir_pool[int(rng.integers(0, len(ir_pool)))])
    if cfg.noise_enabled:
        lo, hi = cfg.snr_db_range
        snr = float(rng.uniform(lo, hi))
        noise = noise_pool[int(rng.integers(0, len(noise_pool)))]
        if _power(out.samples) > 0:
            out = mix_at_snr(out, noise, snr, rng)
    return out


def proposed_pipeline(segment: AudioBuffer, noise_pool: Sequence[AudioBuffer],
                      ir_pool: Sequence[AudioBuffer], cfg: AugmentConfig,
                      rng: np.random.Generator, context: Optional[AudioBuffer] = None,
                      start: Optional[int] = None,
                      force_filter: Optional[FilterSpec] = None) -> AudioBuffer:
    """Baseline pipeline followed by a sampled roll-off filter (filter applied last)."""
    out = baseline_pipeline(segment, noise_pool, ir_pool, cfg, rng, context, start)
    spec = force_filter if force_filter is not None else sample_filter_spec(rng, cfg.filter_probability)
    if spec is not None:
        out = apply_filter(out, spec)
    return out


PIPELINES = {"baseline": baseline_pipeline, "proposed": proposed_pipeline}


# ---------------------------------------------------------------- pools on disk

def load_pool(directory) -> List[AudioBuffer]:
    """All ``*.wav`` files in a directory, sorted by filename, at 8 kHz."""
    paths = sorted(Path(directory).glob("*.wav"))
    if not paths:
        raise ValueError(f"no WAV files in {directory}")
    return [to_mono_8k(load_wav(p)) for p in paths]


def load_split_manifest(path) -> dict:
    """Read ``{"train": [...], "val": [...], "test": [...]}`` file lists."""
    manifest = json.loads(Path(path).read_text())
    unknown = set(manifest) - {"train", "val", "test"}
    if unknown:
        raise ValueError(f"unknown split names in manifest: {sorted(unknown)}")
    return manifest


def split_files(paths: Sequence, ratios=(0.7, 0.2, 0.1)) -> dict:
    """Deterministic sorted-order train/val/test split of a file list."""
    paths = sorted(str(p) for p in paths)
    n = len(paths)
    a = int(round(ratios[0] * n))
    b = a + int(round(ratios[1] * n))
    return {"train": paths[:a], "val": paths[a:b], "test": paths[b:]}
