import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from afprint import corpusgen, peakfp
from afprint.augment import mix_at_snr
from afprint.dsp import AudioBuffer
from afprint.peakfp import LandmarkHash, Peak, PeakIndex


def test_constant_spectrogram_has_no_peaks():
    assert peakfp.extract_peaks(np.ones((64, 40))) == []


def test_single_cell_peak():
    s = np.full((64, 40), 1e-6)
    s[20, 7] = 1.0
    assert peakfp.extract_peaks(s) == [Peak(20, 7)]


def test_dual_tone_bins():
    t = np.arange(8000 * 3) / 8000
    x = 0.4 * np.sin(2 * np.pi * 1000 * t) + 0.4 * np.sin(2 * np.pi * 3000 * t)
    x += np.random.default_rng(0).normal(size=len(t)) * 1e-3
    peaks = peakfp.extract_peaks(peakfp.stft_magnitude(AudioBuffer(x, 8000)))
    assert peaks
    expected = {round(1000 * 1024 / 8000), round(3000 * 1024 / 8000)}  # bins 128 and 384
    counts = np.bincount([p.freq_bin for p in peaks], minlength=513)
    assert set(np.argsort(counts)[-2:].tolist()) == expected
    # a flat tone row rarely beats its whole time neighbourhood, yet the two rows
    # still hold far more than their uniform share (2/513) of all peaks
    assert (counts[128] + counts[384]) / len(peaks) > 0.25


def test_peaks_sorted_by_frame_then_bin():
    song = corpusgen.synth_song(corpusgen.SynthSongSpec(seed=3, duration_s=5))
    peaks = peakfp.extract_peaks(peakfp.stft_magnitude(song))
    keys = [(p.frame, p.freq_bin) for p in peaks]
    assert keys == sorted(keys)


def test_time_shift_covariance():
    song = corpusgen.synth_song(corpusgen.SynthSongSpec(seed=4, duration_s=5)).samples
    spec_a = peakfp.stft_magnitude(AudioBuffer(song[256:], 8000))
    a = peakfp.extract_peaks(spec_a)
    b = peakfp.extract_peaks(peakfp.stft_magnitude(AudioBuffer(song, 8000)))
    # ignore frames whose neighbourhood reaches either spectrogram's edge
    lo, hi = 8, spec_a.shape[1] - 8
    inner_a = {(p.freq_bin, p.frame + 1) for p in a if lo <= p.frame < hi}
    inner_b = {(p.freq_bin, p.frame) for p in b if lo + 1 <= p.frame < hi + 1}
    assert len(inner_b) > 20
    assert inner_a == inner_b


def test_pack_hash_example():
    assert peakfp.pack_hash(100, 200, 50) == (100 << 22) | (200 << 12) | 50 == 420_249_650


@given(st.integers(0, 1023), st.integers(0, 1023), st.integers(1, 4095))
def test_pack_unpack_roundtrip(k0, k1, dn):
    v = peakfp.pack_hash(k0, k1, dn)
    assert 0 <= v < 2 ** 32
    assert peakfp.unpack_hash(v) == (k0, k1, dn)


def test_pack_hash_ranges():
    with pytest.raises(ValueError):
        peakfp.pack_hash(1024, 0, 1)
    with pytest.raises(ValueError):
        peakfp.pack_hash(0, 0, 0)


def test_hash_single_peak_empty():
    assert peakfp.hash_landmarks([Peak(10, 3)]) == []


def test_hash_fan_out_count():
    peaks = [Peak(100 + i, i) for i in range(7)]  # every pair in zone
    hashes = peakfp.hash_landmarks(peaks, fan_out=3)
    per_anchor = {}
    for h in hashes:
        per_anchor[h.anchor_frame] = per_anchor.get(h.anchor_frame, 0) + 1
    assert [per_anchor.get(i, 0) for i in range(7)] == [min(3, 6 - i) for i in range(7)]
    assert len(hashes) == sum(min(3, 6 - i) for i in range(7))


def test_hash_zone_limits():
    peaks = [Peak(10, 0), Peak(10, 0), Peak(300, 5), Peak(12, 500)]
    # same frame (dn = 0), |dk| > 128 and dn > 200 are all outside the zone
    assert peakfp.hash_landmarks(peaks) == []


@pytest.fixture(scope="module")
def peak_db():
    songs = corpusgen.make_songs(8, seed_offset=300, duration_s=20)
    index = PeakIndex()
    for i, s in enumerate(songs):
        index.add_song(i, s)
    return index, songs


def test_self_match_offset(peak_db):
    index, songs = peak_db
    for sid in (0, 5):
        start_frame = 93
        clip = songs[sid].slice(start_frame * 256, start_frame * 256 + 5 * 8000)
        best = index.match(peakfp.fingerprint(clip))[0]
        assert (best.song_id, best.best_offset) == (sid, start_frame)


def test_silence_no_match(peak_db):
    index, _ = peak_db
    assert index.match(peakfp.fingerprint(AudioBuffer(np.zeros(5 * 8000), 8000))) == []
    assert index.identify(AudioBuffer(np.zeros(5 * 8000), 8000)) is None


def test_noisy_query_identified(peak_db):
    index, songs = peak_db
    noise = corpusgen.synth_noise("broadband", 12, seed=1)
    clip = songs[2].slice(8000, 8000 * 11)
    noisy = mix_at_snr(clip, noise, 10.0, np.random.default_rng(0))
    assert index.identify(noisy) == 2


def test_votes_degrade_with_noise(peak_db):
    index, songs = peak_db
    noise = corpusgen.synth_noise("babble", 12, seed=2)
    clip = songs[1].slice(16000, 16000 + 8 * 8000)
    means = []
    for snr in (20, 10, 0):
        votes = []
        for seed in range(4):
            noisy = mix_at_snr(clip, noise, snr, np.random.default_rng(seed))
            ranked = {m.song_id: m.votes for m in index.match(peakfp.fingerprint(noisy))}
            votes.append(ranked.get(1, 0))
        means.append(np.mean(votes))
    assert means[0] >= means[1] >= means[2]


def test_ranking_tie_break_by_song():
    index = PeakIndex()
    h = [LandmarkHash(peakfp.pack_hash(5, 6, 7), 10)]
    index.add_hashes(4, h)
    index.add_hashes(2, h)
    ranked = index.match([LandmarkHash(h[0].value, 0)])
    assert [m.song_id for m in ranked] == [2, 4]


def test_table_sorted_and_persisted(peak_db, tmp_path):
    index, _ = peak_db
    t = index.table
    keys = list(zip(t["hash"].tolist(), t["song_id"].tolist(), t["anchor"].tolist()))
    assert keys == sorted(keys)
    index.save(tmp_path / "p.afph")
    data = (tmp_path / "p.afph").read_bytes()
    magic, version, count = struct.unpack_from("<4sHQ", data)
    assert (magic, version, count) == (b"AFPH", 1, len(index))
    assert len(data) == 14 + 12 * len(index)
    back = PeakIndex.load(tmp_path / "p.afph")
    assert back.table.tobytes() == t.tobytes()
    with pytest.raises(ValueError):
        PeakIndex.from_bytes(data[:-3])
