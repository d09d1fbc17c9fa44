"""Audio ingestion, resampling, segmentation, energy gating and log-mel features."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import gcd
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy import signal

SAMPLE_RATE = 8000
WINDOW_S = 1.0
HOP_S = 0.5

N_FFT = 1024
MEL_HOP = 256
N_MELS = 256
N_FRAMES = 32
LOG_EPS = 1e-8


class AudioFormatError(ValueError):
    """Raised for WAV files this package cannot decode."""


@dataclass(eq=False)
class AudioBuffer:
    """Mono signal in [-1, 1] with its sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        self.sample_rate_hz = int(self.sample_rate_hz)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def slice(self, start: int, stop: int) -> "AudioBuffer":
        return AudioBuffer(self.samples[start:stop], self.sample_rate_hz)


@dataclass(frozen=True, order=True)
class SegmentRef:
    """A 1 s database segment: start time is ``segment_index * 0.5`` seconds."""

    song_id: int
    segment_index: int

    @property
    def start_s(self) -> float:
        return self.segment_index * HOP_S


@dataclass(eq=False)
class Spectrogram:
    """F x T log-power matrix plus the centre frequency of each row."""

    values: np.ndarray
    bin_to_hz: np.ndarray

    @property
    def freq_bins(self) -> int:
        return self.values.shape[0]

    @property
    def time_frames(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------- WAV I/O

def load_wav(path) -> AudioBuffer:
    """Read a 16-bit PCM RIFF/WAVE file, downmixing stereo by channel mean.

    Chunks are walked by hand so that non-PCM payloads (MP3-in-WAV, float)
    are reported as unsupported instead of silently misread.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(2, "no such audio file", str(path))
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pcm = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        size = struct.unpack_from("<I", data, pos + 4)[0]
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise AudioFormatError(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise AudioFormatError(f"{path}: malformed fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            pcm = body
        pos += 8 + size + (size & 1)

    if fmt is None or pcm is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")
    codec, channels, rate, _, block_align, bits = fmt
    if codec != 1 or bits != 16:
        raise AudioFormatError(f"{path}: unsupported codec {codec} / {bits}-bit (need PCM16)")
    if channels not in (1, 2):
        raise AudioFormatError(f"{path}: {channels} channels not supported")
    if len(pcm) % block_align:
        raise AudioFormatError(f"{path}: truncated data chunk")

    frames = np.frombuffer(pcm, dtype="<i2").reshape(-1, channels).astype(np.float64) / 32768.0
    return AudioBuffer(frames.mean(axis=1), rate)


def save_wav(path, audio: AudioBuffer) -> None:
    """Write mono PCM16; samples are clipped to [-1, 1)."""
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, audio.sample_rate_hz,
                                    audio.sample_rate_hz * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(pcm))
    Path(path).write_bytes(header + pcm)


# ---------------------------------------------------------------- resampling

def resample(audio: AudioBuffer, target_hz: int) -> AudioBuffer:
    """Polyphase windowed-sinc resampling (Kaiser beta 8, 64 taps per phase)."""
    target_hz = int(target_hz)
    if target_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_hz}")
    if target_hz == audio.sample_rate_hz:
        return AudioBuffer(audio.samples.copy(), target_hz)
    g = gcd(audio.sample_rate_hz, target_hz)
    up, down = target_hz // g, audio.sample_rate_hz // g
    taps = 64 * max(up, down) + 1
    # cutoff slightly under the new Nyquist so the Kaiser transition band clears it
    h = signal.firwin(taps, 0.9 / max(up, down), window=("kaiser", 8.0)) * up
    out = signal.resample_poly(audio.samples, up, down, window=h)
    return AudioBuffer(out, target_hz)


# ---------------------------------------------------------------- segmentation

def segment_count(n_samples: int, sample_rate_hz: int = SAMPLE_RATE,
                  window_s: float = WINDOW_S, hop_s: float = HOP_S) -> int:
    win = int(round(window_s * sample_rate_hz))
    hop = int(round(hop_s * sample_rate_hz))
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def segment_song(audio: AudioBuffer, window_s: float = WINDOW_S,
                 hop_s: float = HOP_S) -> List[Tuple[int, AudioBuffer]]:
    """Cut ``audio`` into overlapping windows; returns ``(local_index, segment)`` pairs."""
    sr = audio.sample_rate_hz
    win = int(round(window_s * sr))
    hop = int(round(hop_s * sr))
    if len(audio) < win:
        raise ValueError(f"audio is {audio.duration_s:.3f} s, shorter than one {window_s} s window")
    n = segment_count(len(audio), sr, window_s, hop_s)
    return [(i, audio.slice(i * hop, i * hop + win)) for i in range(n)]


def segment_matrix(audio: AudioBuffer, window_s: float = WINDOW_S,
                   hop_s: float = HOP_S) -> np.ndarray:
    """Same windows as :func:`segment_song`, stacked as an ``(n, win)`` array view."""
    sr = audio.sample_rate_hz
    win = int(round(window_s * sr))
    hop = int(round(hop_s * sr))
    if len(audio) < win:
        raise ValueError(f"audio is {audio.duration_s:.3f} s, shorter than one {window_s} s window")
    frames = np.lib.stride_tricks.sliding_window_view(audio.samples, win)[::hop]
    return frames


def segment_energy_db(segment) -> float:
    """``10*log10(sum x^2)``; ``-inf`` for an all-zero segment."""
    x = segment.samples if isinstance(segment, AudioBuffer) else np.asarray(segment, dtype=np.float64)
    energy = float(np.dot(x, x))
    if energy == 0.0:
        return float("-inf")
    return 10.0 * np.log10(energy)


def passes_energy_gate(segment, threshold_db: float = 0.0) -> bool:
    return segment_energy_db(segment) > threshold_db


# ---------------------------------------------------------------- mel features

def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    mel = f / f_sp
    return np.where(f >= min_log_hz,
                    min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep, mel)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


_FILTERBANKS = {}


def mel_filterbank(sample_rate_hz: int = SAMPLE_RATE, n_fft: int = N_FFT,
                   n_mels: int = N_MELS, fmin: float = 0.0, fmax: float | None = None):
    """Area-normalised triangular filters, shape ``(n_mels, n_fft // 2 + 1)``.

    Also returns the centre frequency of every filter.
    """
    fmax = sample_rate_hz / 2 if fmax is None else fmax
    key = (sample_rate_hz, n_fft, n_mels, fmin, fmax)
    if key in _FILTERBANKS:
        return _FILTERBANKS[key]
    fft_hz = np.linspace(0.0, sample_rate_hz / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_hz - lower) / (centre - lower)
    falling = (upper - fft_hz) / (upper - centre)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= (2.0 / (upper - lower))
    _FILTERBANKS[key] = (weights, edges[1:-1])
    return _FILTERBANKS[key]


def _stft_power(frames_src: np.ndarray, n_fft: int, hop: int, n_frames: int) -> np.ndarray:
    """Centred (reflect-padded) Hann STFT power for a batch ``(b, n)`` -> ``(b, frames, bins)``."""
    pad = n_fft // 2
    padded = np.pad(frames_src, ((0, 0), (pad, pad)), mode="reflect")
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    window = signal.get_window("hann", n_fft)
    spec = np.fft.rfft(padded[:, idx] * window, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def mel_power_batch(segments: np.ndarray, sample_rate_hz: int = SAMPLE_RATE) -> np.ndarray:
    """Pre-log mel power for a batch of 1 s segments, shape ``(b, 256, 32)``."""
    segments = np.atleast_2d(np.asarray(segments, dtype=np.float64))
    if sample_rate_hz != SAMPLE_RATE:
        raise ValueError(f"mel features need {SAMPLE_RATE} Hz input, got {sample_rate_hz}")
    if segments.shape[1] != SAMPLE_RATE:
        raise ValueError(f"mel features need exactly {SAMPLE_RATE} samples, got {segments.shape[1]}")
    power = _stft_power(segments, N_FFT, MEL_HOP, N_FRAMES)
    fb, _ = mel_filterbank()
    b, t, f = power.shape
    # one flat GEMM over all frames of the batch
    return (power.reshape(b * t, f) @ fb.T).reshape(b, t, -1).transpose(0, 2, 1)


def log_mel_batch(segments: np.ndarray, sample_rate_hz: int = SAMPLE_RATE) -> np.ndarray:
    return np.log(mel_power_batch(segments, sample_rate_hz) + LOG_EPS)


def mel_spectrogram(segment: AudioBuffer) -> Spectrogram:
    """256 x 32 natural-log mel power of one 1 s, 8 kHz segment."""
    values = log_mel_batch(segment.samples[None, :], segment.sample_rate_hz)[0]
    return Spectrogram(values, mel_filterbank()[1])


def to_mono_8k(audio: AudioBuffer) -> AudioBuffer:
    return resample(audio, SAMPLE_RATE) if audio.sample_rate_hz != SAMPLE_RATE else audio
