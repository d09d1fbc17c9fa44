"""Seeded synthetic songs, background noise and impulse responses.

Everything here is a pure function of its seed, so a whole desk corpus can be
rebuilt byte-for-byte instead of being shipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np
from scipy import signal

from .dsp import SAMPLE_RATE, AudioBuffer, save_wav

# major pentatonic degrees, in semitones above the song's root
PENTATONIC = np.array([0, 2, 4, 7, 9])
NOISE_KINDS = ("babble", "hum", "broadband")


@dataclass(frozen=True)
class SynthSongSpec:
    seed: int
    duration_s: float = 30.0
    voices: int = 3
    tempo_bpm: float = 110.0

    def __post_init__(self):
        if self.duration_s < 5:
            raise ValueError("synthetic songs must be at least 5 s long")
        if self.voices < 1:
            raise ValueError("need at least one voice")


def _envelope(n: int, attack: int, release_rate: float) -> np.ndarray:
    t = np.arange(n)
    env = np.exp(-release_rate * t / SAMPLE_RATE)
    a = min(attack, n)
    env[:a] *= np.linspace(0.0, 1.0, a, endpoint=False)
    tail = min(n, 80)
    env[n - tail:] *= np.linspace(1.0, 0.0, tail)
    return env


def synth_song(spec: SynthSongSpec) -> AudioBuffer:
    """Pseudo-music: per-voice pentatonic note sequences with harmonics and envelopes.

    Each song draws its own root, tempo jitter and timbres, which keeps songs
    from different seeds nearly uncorrelated.
    """
    rng = np.random.default_rng([spec.seed, 0x50_4E_47])
    n = int(round(spec.duration_s * SAMPLE_RATE))
    out = np.zeros(n)
    root_hz = 110.0 * 2 ** (rng.uniform(0, 12) / 12)
    beat = 60.0 / (spec.tempo_bpm * rng.uniform(0.8, 1.25))

    for v in range(spec.voices):
        octave = rng.integers(0, 3) if v else 0
        n_harm = int(rng.integers(2, 6))
        harm_amp = rng.uniform(0.2, 1.0, n_harm) / np.arange(1, n_harm + 1)
        decay = rng.uniform(1.0, 6.0)
        gain = rng.uniform(0.4, 1.0)
        t0 = 0.0
        while t0 < spec.duration_s:
            dur_beats = rng.choice([0.25, 0.5, 0.5, 1.0, 1.0, 2.0])
            dur = dur_beats * beat
            if rng.random() < 0.15:  # rest
                t0 += dur
                continue
            degree = PENTATONIC[rng.integers(0, 5)] + 12 * (octave + rng.integers(0, 2))
            f0 = root_hz * 2 ** (degree / 12)
            start = int(t0 * SAMPLE_RATE)
            length = min(int(dur * SAMPLE_RATE), n - start)
            if length <= 0:
                break
            t = np.arange(length) / SAMPLE_RATE
            phase = rng.uniform(0, 2 * np.pi, n_harm)
            tone = np.zeros(length)
            for h in range(n_harm):
                fh = f0 * (h + 1)
                if fh < 0.45 * SAMPLE_RATE:
                    tone += harm_amp[h] * np.sin(2 * np.pi * fh * t + phase[h])
            out[start:start + length] += gain * tone * _envelope(length, 80, decay)
            t0 += dur

    # sparse percussive clicks give the peak-picker and encoder transient cues
    n_hits = int(spec.duration_s / beat)
    for _ in range(n_hits):
        if rng.random() < 0.5:
            continue
        start = int(rng.uniform(0, spec.duration_s) * SAMPLE_RATE)
        length = min(800, n - start)
        burst = rng.standard_normal(length) * np.exp(-np.arange(length) / 120.0)
        out[start:start + length] += 0.3 * burst

    peak = np.max(np.abs(out))
    return AudioBuffer(out * (0.9 / peak), SAMPLE_RATE)


def synth_noise(kind: str, duration_s: float, seed: int) -> AudioBuffer:
    """Noise of a given class at RMS 0.1: ``babble``, ``hum`` or ``broadband``."""
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    rng = np.random.default_rng([seed, NOISE_KINDS.index(kind), 0x4E4F])
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    if kind == "broadband":
        x = rng.standard_normal(n)
    elif kind == "hum":
        x = np.zeros(n)
        for h in range(1, 8):
            x += np.sin(2 * np.pi * 50.0 * h * t + rng.uniform(0, 2 * np.pi)) / h
        x += 0.01 * rng.standard_normal(n)
    else:
        # several "talkers": noise through a wandering formant filter with syllabic AM
        x = np.zeros(n)
        for _ in range(6):
            src = rng.standard_normal(n)
            lo = rng.uniform(250, 700)
            sos = signal.butter(2, [lo, lo * rng.uniform(2.5, 4.5)], btype="bandpass",
                                fs=SAMPLE_RATE, output="sos")
            band = signal.sosfilt(sos, src)
            rate = rng.uniform(3, 6)
            am = 0.5 * (1 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
            x += band * am ** 2
    x = x - x.mean()
    x *= 0.1 / np.sqrt(np.mean(x ** 2))
    return AudioBuffer(x, SAMPLE_RATE)


def synth_ir(rt60_s: float, seed: int) -> AudioBuffer:
    """Exponentially decaying noise tail after a leading unit impulse.

    The amplitude envelope reaches -60 dB exactly at ``rt60_s``.
    """
    if not 0.05 < rt60_s < 1.0:
        raise ValueError("rt60 must lie in (0.05, 1.0) s")
    rng = np.random.default_rng([seed, 0x4952])
    n = int(round(1.2 * rt60_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    env = 10 ** (-3.0 * t / rt60_s)
    ir = 0.3 * rng.standard_normal(n) * env
    ir[0] = 1.0
    return AudioBuffer(ir, SAMPLE_RATE)


def estimate_rt60(ir: AudioBuffer, block_s: float = 0.01) -> float:
    """Fit a line to block log-energy of the tail; return the -60 dB time."""
    x = ir.samples[1:]
    block = max(1, int(block_s * ir.sample_rate_hz))
    nb = len(x) // block
    energy = (x[:nb * block] ** 2).reshape(nb, block).mean(axis=1)
    t = (np.arange(nb) + 0.5) * block / ir.sample_rate_hz
    slope, _ = np.polyfit(t, 10 * np.log10(energy + 1e-30), 1)
    # energy in dB falls at -60 / rt60 dB per second
    return -60.0 / slope


# ---------------------------------------------------------------- corpus layout

def song_seeds(count: int, offset: int = 0) -> List[int]:
    return [offset + i for i in range(count)]


def make_songs(count: int, seed_offset: int = 0, duration_s: float = 30.0) -> List[AudioBuffer]:
    return [synth_song(SynthSongSpec(seed=s, duration_s=duration_s))
            for s in song_seeds(count, seed_offset)]


def make_noise_pool(seed: int, duration_s: float = 20.0) -> List[AudioBuffer]:
    return [synth_noise(kind, duration_s, seed) for kind in NOISE_KINDS]


def make_ir_pool(seed: int, count: int = 5) -> List[AudioBuffer]:
    rng = np.random.default_rng([seed, 0x5254])
    return [synth_ir(float(rng.uniform(0.1, 0.6)), seed * 1000 + i) for i in range(count)]


def write_corpus(root, n_songs: int = 100, song_seconds: float = 30.0,
                 seed: int = 0) -> Dict[str, List[Path]]:
    """Write ``songs/``, ``noise/{train,val,test}/`` and ``ir/{train,val}/`` WAV trees."""
    root = Path(root)
    written: Dict[str, List[Path]] = {}

    def put(sub, name, audio):
        d = root / sub
        d.mkdir(parents=True, exist_ok=True)
        p = d / name
        save_wav(p, audio)
        written.setdefault(sub, []).append(p)

    for i, song in enumerate(make_songs(n_songs, seed_offset=seed * 10_000, duration_s=song_seconds)):
        put("songs", f"song_{i:04d}.wav", song)
    for split, s in (("train", 1), ("val", 2), ("test", 3)):
        for kind, audio in zip(NOISE_KINDS, make_noise_pool(seed * 10 + s)):
            put(f"noise/{split}", f"{kind}.wav", audio)
    for split, s in (("train", 1), ("val", 2)):
        for i, ir in enumerate(make_ir_pool(seed * 10 + s)):
            put(f"ir/{split}", f"ir_{i:02d}.wav", ir)
    return written
