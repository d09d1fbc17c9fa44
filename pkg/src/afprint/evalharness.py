"""Evaluation protocols, the quantisation sweep and machine-readable reports.

Two protocols are supported:

* offline SNR: noise is mixed into clean query excerpts at a fixed SNR and
  every 1 s query segment is scored with the Top-1 hit rule;
* simulated re-recording: test songs are concatenated into one "concert",
  degraded by a microphone/room/noise model at three severities, and random
  in-song windows are identified by majority voting.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import augment
from .dsp import SAMPLE_RATE, AudioBuffer, SegmentRef, segment_matrix
from .pqindex import FingerprintIndex, IndexConfig
from .retrieval import Embedder, judge_neighbor, top1_hit_rate, vote

QUERY_LENGTHS = (1, 2, 3, 4, 5, 10, 15)
LEVEL_SNR_DB = {"low": 12.0, "mid": 6.0, "high": 0.0}
MIC_HIGH_PASS_HZ = 300.0
MIC_LOW_PASS_HZ = 3200.0
CONCERT_RMS = 0.1

REPORT_COLUMNS = ("model_tag", "protocol", "level_or_snr", "query_len_s", "metric_name",
                  "value", "n_queries", "config_hash")


# ---------------------------------------------------------------- reports

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    rows: List[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def add(self, model_tag: str, protocol: str, level_or_snr, query_len_s: float,
            metric_name: str, value: float, n_queries: int, **extra) -> dict:
        if not 0.0 <= value <= 100.0:
            raise ValueError(f"{metric_name}={value} outside [0, 100]")
        row = {"model_tag": model_tag, "protocol": protocol, "level_or_snr": level_or_snr,
               "query_len_s": query_len_s, "metric_name": metric_name, "value": float(value),
               "n_queries": int(n_queries), "config_hash": self.config_hash, **extra}
        self.rows.append(row)
        return row

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)

    def value(self, **match) -> float:
        hits = [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {match}")
        return hits[0]["value"]

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "config_hash": self.config_hash, "rows": self.rows},
                          sort_keys=True, indent=1, default=str)

    def to_csv(self) -> str:
        extra = sorted({k for r in self.rows for k in r} - set(REPORT_COLUMNS))
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(REPORT_COLUMNS) + extra, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()

    def write(self, run_dir) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "report.json").write_text(self.to_json())
        (run_dir / "report.csv").write_text(self.to_csv())


# ---------------------------------------------------------------- protocol material

@dataclass(eq=False)
class ProtocolRecording:
    level: str
    audio: AudioBuffer
    song_boundaries: List[Tuple[int, float, float]]
    snr_db: Optional[float] = None

    def song_span(self, i: int) -> Tuple[int, int, int]:
        song, start, end = self.song_boundaries[i]
        sr = self.audio.sample_rate_hz
        return song, int(round(start * sr)), int(round(end * sr))


def build_concert(songs: Sequence[AudioBuffer], song_ids: Optional[Sequence[int]] = None,
                  target_rms: float = CONCERT_RMS) -> ProtocolRecording:
    """Scale every song to a common RMS and concatenate them into one recording."""
    if len(songs) < 2:
        raise ValueError("a concert needs at least two songs")
    song_ids = list(range(len(songs))) if song_ids is None else list(song_ids)
    sr = songs[0].sample_rate_hz
    parts, bounds, t = [], [], 0
    for sid, s in zip(song_ids, songs):
        if s.sample_rate_hz != sr:
            raise ValueError("all concert songs must share one sample rate")
        if s.duration_s < 5:
            raise ValueError(f"song {sid} is shorter than 5 s")
        rms = np.sqrt(np.mean(s.samples ** 2))
        if rms == 0:
            raise ValueError(f"song {sid} is silent and cannot be normalised")
        parts.append(s.samples * (target_rms / rms))
        bounds.append((int(sid), t / sr, (t + len(s)) / sr))
        t += len(s)
    return ProtocolRecording("clean", AudioBuffer(np.concatenate(parts), sr), bounds)


def noise_track(noise_pool: Sequence[AudioBuffer], n: int, rng: np.random.Generator) -> np.ndarray:
    """A background bed of length ``n`` built from randomly chosen, randomly cropped pool clips."""
    out = np.empty(n)
    pos = 0
    while pos < n:
        clip = noise_pool[int(rng.integers(len(noise_pool)))].samples
        start = int(rng.integers(0, max(1, len(clip) // 2)))
        piece = clip[start:][: n - pos]
        rms = np.sqrt(np.mean(piece ** 2))
        out[pos:pos + len(piece)] = piece / rms if rms > 0 else piece
        pos += len(piece)
    return out


def simulate_recording(clean: ProtocolRecording, level: str, noise_pool: Sequence[AudioBuffer],
                       ir_pool: Sequence[AudioBuffer], seed: int = 0) -> ProtocolRecording:
    """Deterministic stand-in for re-recording the concert through a phone microphone.

    Room reverberation is applied to the music, background noise is added at
    the level's SNR and the microphone's band limit (300 Hz high-pass and
    3.2 kHz low-pass, both 12 dB/octave) shapes the mixture.  The SNR is set
    on the band-limited components.
    """
    if level not in LEVEL_SNR_DB:
        raise ValueError(f"level must be one of {sorted(LEVEL_SNR_DB)}")
    if not noise_pool or not ir_pool:
        raise ValueError("noise and IR pools must be non-empty")
    rng = np.random.default_rng([seed, 0x5245])
    sr = clean.audio.sample_rate_hz
    ir = ir_pool[int(rng.integers(len(ir_pool)))]
    music = augment.convolve_ir(clean.audio, ir).samples
    bed = noise_track(noise_pool, len(music), rng)

    def mic(x):
        x = augment.shape_spectrum(x, sr, MIC_HIGH_PASS_HZ, 2, augment.HIGH_PASS)
        return augment.shape_spectrum(x, sr, MIC_LOW_PASS_HZ, 2, augment.LOW_PASS)

    snr = LEVEL_SNR_DB[level]
    mixed = augment.mix_at_snr(AudioBuffer(mic(music), sr), AudioBuffer(mic(bed), sr), snr)
    return ProtocolRecording(level, mixed, list(clean.song_boundaries), snr)


def measured_snr_db(signal_part: np.ndarray, noise_part: np.ndarray) -> float:
    return 10 * np.log10(np.mean(signal_part ** 2) / np.mean(noise_part ** 2))


def spectral_centroid_hz(audio: AudioBuffer) -> float:
    spec = np.abs(np.fft.rfft(audio.samples)) ** 2
    freqs = np.fft.rfftfreq(len(audio), 1.0 / audio.sample_rate_hz)
    return float((freqs * spec).sum() / spec.sum())


# ---------------------------------------------------------------- query drawing

@dataclass(frozen=True)
class Query:
    ordinal: int
    length_s: float
    song_id: int
    start_sample: int  # absolute, in the recording or song
    song_start_s: float  # position inside the song


def draw_queries(recording: ProtocolRecording, length_s: float, count: int,
                 seed: int) -> List[Query]:
    """Random in-song windows; query ``i`` uses the RNG stream ``(seed, i)``.

    Sharing streams across lengths means a longer query of the same ordinal
    sits on the same song at the same relative position.
    """
    sr = recording.audio.sample_rate_hz
    n = int(round(length_s * sr))
    eligible = [i for i in range(len(recording.song_boundaries))
                if recording.song_span(i)[2] - recording.song_span(i)[1] >= n]
    if count and not eligible:
        raise ValueError(f"no song is long enough for a {length_s} s query")
    out = []
    for q in range(count):
        rng = np.random.default_rng([seed, q])
        song, a, b = recording.song_span(eligible[int(rng.integers(len(eligible)))])
        off = int(rng.random() * (b - a - n + 1))
        out.append(Query(q, float(length_s), song, a + off, off / sr))
    return out


# ---------------------------------------------------------------- proposed protocol

IdentifyFn = Callable[[AudioBuffer], Optional[int]]


def _accuracy(correct: int, n: int) -> float:
    return 100.0 * correct / n


def evaluate_song_accuracy(recording: ProtocolRecording, identify_fn: IdentifyFn,
                           query_lens: Iterable[float], queries_per_len: int, seed: int,
                           model_tag: str, report: EvalReport) -> EvalReport:
    """Song accuracy of an arbitrary identifier (used for the peak baseline)."""
    for L in query_lens:
        queries = draw_queries(recording, L, queries_per_len, seed)
        if not queries:
            continue
        sr = recording.audio.sample_rate_hz
        n = int(round(L * sr))
        correct = sum(identify_fn(recording.audio.slice(q.start_sample, q.start_sample + n)) == q.song_id
                      for q in queries)
        report.add(model_tag, "proposed", recording.level, L, "accuracy",
                   _accuracy(correct, len(queries)), len(queries))
    return report


def identify_many(clips: Sequence[AudioBuffer], index: FingerprintIndex, embedder: Embedder,
                  top_k: int = 4):
    """Batched equivalent of calling :func:`retrieval.identify` on every clip."""
    mats = [segment_matrix(c) for c in clips]
    counts = [len(m) for m in mats]
    if not mats:
        return []
    hits = index.search_batch(embedder(np.concatenate(mats)), top_k)
    out, pos = [], 0
    for c in counts:
        out.append(vote(hits[pos:pos + c]))
        pos += c
    return out


def run_proposed_eval(recording: ProtocolRecording, index: FingerprintIndex, embedder: Embedder,
                      query_lens: Iterable[float] = QUERY_LENGTHS, queries_per_len: int = 200,
                      top_k: int = 4, seed: int = 0, model_tag: str = "encoder",
                      report: Optional[EvalReport] = None) -> EvalReport:
    """Song accuracy (% correct majority-vote winners) per query length."""
    query_lens = list(query_lens)
    report = report if report is not None else EvalReport(config={
        "protocol": "proposed", "level": recording.level, "query_lens": query_lens,
        "queries_per_len": queries_per_len, "top_k": top_k, "seed": seed, "model_tag": model_tag})
    sr = recording.audio.sample_rate_hz
    for L in query_lens:
        queries = draw_queries(recording, L, queries_per_len, seed)
        if not queries:
            continue
        n = int(round(L * sr))
        clips = [recording.audio.slice(q.start_sample, q.start_sample + n) for q in queries]
        results = identify_many(clips, index, embedder, top_k)
        correct = sum(r.winner == q.song_id for r, q in zip(results, queries))
        report.add(model_tag, "proposed", recording.level, L, "accuracy",
                   _accuracy(correct, len(queries)), len(queries))
    return report


# ---------------------------------------------------------------- offline-SNR protocol

def run_baseline_eval(test_songs: Sequence[AudioBuffer], index: FingerprintIndex, embedder: Embedder,
                      snr_levels: Iterable[float] = (0, 5, 10, 15),
                      query_lens: Iterable[float] = (1, 2, 3, 4, 5),
                      noise_pool_test: Sequence[AudioBuffer] = (), queries_per_len: int = 200,
                      seed: int = 0, top_k: int = 4, song_ids: Optional[Sequence[int]] = None,
                      model_tag: str = "encoder") -> EvalReport:
    """Top-1 hit rate over every 1 s segment of noisy query excerpts.

    An SNR of ``inf`` means no noise.  Each (SNR, length) cell also reports
    the per-segment song accuracy and the majority-vote song accuracy.
    """
    snr_levels, query_lens = list(snr_levels), list(query_lens)
    song_ids = list(range(len(test_songs))) if song_ids is None else list(song_ids)
    report = EvalReport(config={
        "protocol": "baseline", "snr_levels": [str(s) for s in snr_levels], "query_lens": query_lens,
        "queries_per_len": queries_per_len, "top_k": top_k, "seed": seed, "model_tag": model_tag})
    if any(np.isfinite(s) for s in snr_levels) and not noise_pool_test:
        raise ValueError("finite SNR levels need a test noise pool")
    for snr in snr_levels:
        for L in query_lens:
            n = int(round(L * SAMPLE_RATE))
            judgments, seg_song_ok, voted_ok, n_queries = [], 0, 0, 0
            clips, truths = [], []
            for q in range(queries_per_len):
                rng = np.random.default_rng([seed, q])
                si = int(rng.integers(len(test_songs)))
                song = test_songs[si]
                start = int(rng.integers(0, len(song) - n + 1))
                clip = song.slice(start, start + n)
                if np.isfinite(snr):
                    noise = noise_pool_test[int(rng.integers(len(noise_pool_test)))]
                    clip = augment.mix_at_snr(clip, noise, float(snr), rng)
                clips.append(clip)
                truths.append((song_ids[si], start / SAMPLE_RATE))
            if not clips:
                continue
            mats = [segment_matrix(c) for c in clips]
            hits = index.search_batch(embedder(np.concatenate(mats)), top_k)
            pos = 0
            for (sid, t0), mat in zip(truths, mats):
                qhits = hits[pos:pos + len(mat)]
                pos += len(mat)
                for j, seg_hits in enumerate(qhits):
                    best = seg_hits[0][0] if seg_hits else None
                    judgments.append(judge_neighbor(best, (sid, t0 + 0.5 * j)))
                    seg_song_ok += best is not None and best.song_id == sid
                voted_ok += vote(qhits).winner == sid
                n_queries += 1
            label = "inf" if not np.isfinite(snr) else float(snr)
            report.add(model_tag, "baseline", label, L, "top1_hit_rate", top1_hit_rate(judgments), len(judgments))
            report.add(model_tag, "baseline", label, L, "segment_song_accuracy",
                       _accuracy(seg_song_ok, len(judgments)), len(judgments))
            report.add(model_tag, "baseline", label, L, "accuracy", _accuracy(voted_ok, n_queries), n_queries)
    return report


# ---------------------------------------------------------------- quantisation sweep

SWEEP_M_VALUES = (4, 8, 16, 32, 64, 128)


def quantization_sweep(embeddings: np.ndarray, db_refs: Sequence[SegmentRef],
                       m_values: Iterable[int], eval_fn: Callable[[FingerprintIndex], EvalReport],
                       base_config: IndexConfig, train_sample: Optional[np.ndarray] = None):
    """Rebuild the index for each ``m`` and run ``eval_fn`` on it.

    Returns ``(report, size_table)``; every report row is stamped with ``m``
    and the code length ``8 * m`` bits (for 8-bit codebooks).
    """
    m_values = list(m_values)
    bad = [m for m in m_values if base_config.dim % m]
    if bad:
        raise ValueError(f"m values {bad} do not divide D={base_config.dim}")
    report = EvalReport(config={"sweep_m": m_values, "dim": base_config.dim,
                                "coarse_cells": base_config.coarse_cells, "nprobe": base_config.nprobe,
                                "code_bits": base_config.code_bits, "seed": base_config.seed})
    sizes = []
    for m in m_values:
        cfg = IndexConfig(**{**base_config.__dict__, "m": m})
        index = FingerprintIndex.build(embeddings, db_refs, cfg, train_sample)
        sub = eval_fn(index)
        for r in sub.rows:
            row = dict(r, m=m, code_length_bits=cfg.code_length_bits)
            row["config_hash"] = report.config_hash
            report.rows.append(row)
        code_b, ser_b = index.size_report()
        sizes.append({"m": m, "code_length_bits": cfg.code_length_bits, "code_bytes": code_b,
                      "serialized_bytes": ser_b})
    return report, sizes


def sizes_csv(sizes: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["m", "code_length_bits", "code_bytes", "serialized_bytes"],
                       lineterminator="\n")
    w.writeheader()
    w.writerows(sizes)
    return buf.getvalue()


def self_recall_eval(embeddings: np.ndarray, refs: Sequence[SegmentRef], sample: int = 500,
                     seed: int = 0) -> Callable[[FingerprintIndex], EvalReport]:
    """Closure scoring Recall@1 of stored vectors against themselves (a data-only sweep)."""
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(embeddings), min(sample, len(embeddings)), replace=False))

    def _eval(index: FingerprintIndex) -> EvalReport:
        rep = EvalReport(config={"eval": "self_recall", "sample": len(pick), "seed": seed})
        hits = index.search_batch(embeddings[pick], 1)
        ok = sum(1 for i, h in zip(pick, hits) if h and h[0][0] == refs[i])
        rep.add("embeddings", "self_recall", "clean", 1, "recall_at_1", _accuracy(ok, len(pick)), len(pick))
        return rep

    return _eval


# ---------------------------------------------------------------- database helpers

def embed_songs(songs: Sequence[AudioBuffer], embedder: Embedder,
                song_ids: Optional[Sequence[int]] = None, energy_gate: bool = True):
    """Segment every song, drop segments failing the 0 dB energy gate, embed the rest."""
    song_ids = list(range(len(songs))) if song_ids is None else list(song_ids)
    refs, mats = [], []
    for sid, song in zip(song_ids, songs):
        mat = segment_matrix(song)
        keep = np.ones(len(mat), dtype=bool)
        if energy_gate:
            with np.errstate(divide="ignore"):
                keep = 10 * np.log10(np.einsum("ij,ij->i", mat, mat)) > 0.0
        refs.extend(SegmentRef(int(sid), int(i)) for i in np.flatnonzero(keep))
        mats.append(mat[keep])
    return embedder(np.concatenate(mats)), refs


def build_song_index(songs: Sequence[AudioBuffer], embedder: Embedder, config: IndexConfig,
                     song_ids: Optional[Sequence[int]] = None) -> FingerprintIndex:
    emb, refs = embed_songs(songs, embedder, song_ids)
    return FingerprintIndex.build(emb, refs, config)
