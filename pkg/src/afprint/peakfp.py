"""Spectral-peak landmark fingerprinting (the classic constellation approach).

Local maxima of a linear-frequency STFT are paired into ``(k0, k1, dn)``
landmarks, packed into 32-bit hashes and matched by histogramming the time
offset between stored and query anchors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, signal

from .dsp import AudioBuffer

PEAK_N_FFT = 1024
PEAK_HOP = 256
PEAK_MAGIC = b"AFPH"
PEAK_VERSION = 1
_HEADER = struct.Struct("<4sHQ")
_ENTRY = np.dtype([("hash", "<u4"), ("song_id", "<u4"), ("anchor", "<u4")])

K_BITS, DT_BITS = 10, 12


@dataclass(frozen=True)
class Peak:
    freq_bin: int
    frame: int


@dataclass(frozen=True)
class LandmarkHash:
    value: int
    anchor_frame: int


@dataclass(frozen=True)
class PeakParams:
    neighborhood: Tuple[int, int] = (15, 15)   # (freq bins, frames)
    min_db_above_median: float = 10.0
    fan_out: int = 5
    zone: Tuple[int, int, int] = (1, 200, 128)  # (min dn, max dn, max |dk|)


def stft_magnitude(audio: AudioBuffer, n_fft: int = PEAK_N_FFT, hop: int = PEAK_HOP) -> np.ndarray:
    """Uncentred Hann STFT magnitude, shape ``(n_fft // 2 + 1, frames)``.

    Frame ``n`` starts at sample ``n * hop``, so a query cut at a multiple of
    the hop has frames aligned with the original.
    """
    x = audio.samples
    if len(x) < n_fft:
        x = np.pad(x, (0, n_fft - len(x)))
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    return np.abs(np.fft.rfft(frames * signal.get_window("hann", n_fft), axis=1)).T


def extract_peaks(spec: np.ndarray, neighborhood: Tuple[int, int] = (15, 15),
                  min_db_above_median: float = 10.0) -> List[Peak]:
    """Cells strictly above every neighbour and ``min_db`` above their frame's median."""
    mag = np.asarray(spec, dtype=np.float64)
    if mag.size == 0:
        return []
    db = 20.0 * np.log10(mag + 1e-10)
    footprint = np.ones(neighborhood, dtype=bool)
    footprint[neighborhood[0] // 2, neighborhood[1] // 2] = False
    neigh_max = ndimage.maximum_filter(db, footprint=footprint, mode="constant", cval=-np.inf)
    floor = np.median(db, axis=0, keepdims=True) + min_db_above_median
    k, n = np.nonzero((db > neigh_max) & (db > floor))
    order = np.lexsort((k, n))
    return [Peak(int(k[i]), int(n[i])) for i in order]


def pack_hash(k0: int, k1: int, dn: int) -> int:
    if not (0 <= k0 < 1 << K_BITS and 0 <= k1 < 1 << K_BITS and 0 < dn < 1 << DT_BITS):
        raise ValueError(f"landmark ({k0}, {k1}, {dn}) outside the 10/10/12-bit layout")
    return (k0 << (K_BITS + DT_BITS)) | (k1 << DT_BITS) | dn


def unpack_hash(value: int) -> Tuple[int, int, int]:
    return (value >> (K_BITS + DT_BITS)) & 0x3FF, (value >> DT_BITS) & 0x3FF, value & 0xFFF


def hash_landmarks(peaks: Sequence[Peak], fan_out: int = 5,
                   zone: Tuple[int, int, int] = (1, 200, 128)) -> List[LandmarkHash]:
    """Pair each anchor with up to ``fan_out`` later peaks inside its target zone.

    ``peaks`` must be sorted by ``(frame, freq_bin)``.
    """
    min_dn, max_dn, max_dk = zone
    out: List[LandmarkHash] = []
    for i, a in enumerate(peaks):
        used = 0
        for b in peaks[i + 1:]:
            dn = b.frame - a.frame
            if dn > max_dn:
                break
            if dn < min_dn or abs(b.freq_bin - a.freq_bin) > max_dk:
                continue
            out.append(LandmarkHash(pack_hash(a.freq_bin, b.freq_bin, dn), a.frame))
            used += 1
            if used == fan_out:
                break
    return out


def fingerprint(audio: AudioBuffer, params: PeakParams = PeakParams()) -> List[LandmarkHash]:
    peaks = extract_peaks(stft_magnitude(audio), params.neighborhood, params.min_db_above_median)
    return hash_landmarks(peaks, params.fan_out, params.zone)


@dataclass(frozen=True)
class PeakMatch:
    song_id: int
    votes: int
    best_offset: int


class PeakIndex:
    """Inverted lists ``hash -> (song_id, anchor_frame)`` held as one sorted table."""

    def __init__(self, params: PeakParams = PeakParams()):
        self.params = params
        self._chunks: List[np.ndarray] = []
        self._table = np.zeros(0, dtype=_ENTRY)

    def add_hashes(self, song_id: int, hashes: Iterable[LandmarkHash]) -> None:
        hashes = list(hashes)
        rec = np.zeros(len(hashes), dtype=_ENTRY)
        rec["hash"] = [h.value for h in hashes]
        rec["song_id"] = song_id
        rec["anchor"] = [h.anchor_frame for h in hashes]
        self._chunks.append(rec)

    def add_song(self, song_id: int, audio: AudioBuffer) -> None:
        self.add_hashes(song_id, fingerprint(audio, self.params))

    @property
    def table(self) -> np.ndarray:
        if self._chunks:
            t = np.concatenate([self._table] + self._chunks)
            self._table = t[np.lexsort((t["anchor"], t["song_id"], t["hash"]))]
            self._chunks = []
        return self._table

    def __len__(self) -> int:
        return len(self.table)

    def lookup(self, value: int) -> List[Tuple[int, int]]:
        t = self.table
        lo, hi = np.searchsorted(t["hash"], [value, value + 1])
        return [(int(s), int(a)) for s, a in zip(t["song_id"][lo:hi], t["anchor"][lo:hi])]

    def match(self, query_hashes: Sequence[LandmarkHash]) -> List[PeakMatch]:
        """Songs ranked by their best offset-histogram bin; empty list means no match."""
        if not query_hashes:
            return []
        t = self.table
        qh = np.array([h.value for h in query_hashes], dtype=np.uint32)
        qa = np.array([h.anchor_frame for h in query_hashes], dtype=np.int64)
        lo = np.searchsorted(t["hash"], qh, side="left")
        hi = np.searchsorted(t["hash"], qh, side="right")
        counts = hi - lo
        if counts.sum() == 0:
            return []
        qi = np.repeat(np.arange(len(qh)), counts)
        rows = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi) if b > a])
        songs = t["song_id"][rows].astype(np.int64)
        offsets = t["anchor"][rows].astype(np.int64) - qa[qi]
        pairs, votes = np.unique(np.stack([songs, offsets], 1), axis=0, return_counts=True)
        # per song keep the best bin; ties inside a song go to the smallest offset
        order = np.lexsort((pairs[:, 1], -votes, pairs[:, 0]))
        pairs, votes = pairs[order], votes[order]
        first = np.r_[True, pairs[1:, 0] != pairs[:-1, 0]]
        best = [PeakMatch(int(s), int(v), int(o)) for (s, o), v in zip(pairs[first], votes[first])]
        best.sort(key=lambda r: (-r.votes, r.song_id))
        return best

    def identify(self, audio: AudioBuffer) -> Optional[int]:
        ranked = self.match(fingerprint(audio, self.params))
        return ranked[0].song_id if ranked else None

    # -- persistence ---------------------------------------------------

    def to_bytes(self) -> bytes:
        t = self.table
        return _HEADER.pack(PEAK_MAGIC, PEAK_VERSION, len(t)) + t.astype(_ENTRY).tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, params: PeakParams = PeakParams()) -> "PeakIndex":
        magic, version, count = _HEADER.unpack_from(data, 0)
        if magic != PEAK_MAGIC:
            raise ValueError(f"bad peak-index magic {magic!r}")
        if version != PEAK_VERSION:
            raise ValueError(f"unsupported peak-index version {version}")
        body = data[_HEADER.size:]
        if len(body) != count * _ENTRY.itemsize:
            raise ValueError("peak index entry table is truncated or has trailing bytes")
        index = cls(params)
        index._table = np.frombuffer(body, dtype=_ENTRY).copy()
        return index

    @classmethod
    def load(cls, path, params: PeakParams = PeakParams()) -> "PeakIndex":
        return cls.from_bytes(Path(path).read_bytes(), params)
