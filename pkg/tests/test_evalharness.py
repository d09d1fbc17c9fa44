import csv
import io
import json

import numpy as np
import pytest

from afprint import corpusgen, evalharness as H
from afprint.dsp import AudioBuffer
from afprint.pqindex import IndexConfig


class SpectrumEmbedder:
    """Cheap stand-in encoder: random projection of a coarse log spectrum."""

    def __init__(self, seed=0):
        self.proj = np.random.default_rng(seed).normal(size=(200, 64))

    def __call__(self, segs):
        segs = np.atleast_2d(segs)
        mag = np.abs(np.fft.rfft(segs, axis=1))[:, :4000].reshape(len(segs), 200, 20).mean(axis=2)
        z = np.log(mag + 1e-6) @ self.proj
        z -= z.mean(axis=1, keepdims=True)
        return z / np.linalg.norm(z, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def material():
    songs = corpusgen.make_songs(6, seed_offset=500, duration_s=12)
    emb = SpectrumEmbedder()
    index = H.build_song_index(songs, emb, IndexConfig(m=8, code_bits=4, coarse_cells=4, nprobe=4))
    concert = H.build_concert(songs)
    noise, irs = corpusgen.make_noise_pool(3, 5), corpusgen.make_ir_pool(3, 2)
    return songs, emb, index, concert, noise, irs


def test_concert_boundaries_and_rms():
    songs = corpusgen.make_songs(2, seed_offset=40, duration_s=10)
    rec = H.build_concert(songs, song_ids=[7, 9])
    assert rec.song_boundaries == [(7, 0.0, 10.0), (9, 10.0, 20.0)]
    for i in range(2):
        _, a, b = rec.song_span(i)
        assert np.isclose(np.sqrt(np.mean(rec.audio.samples[a:b] ** 2)), 0.1)


def test_concert_errors():
    song = corpusgen.make_songs(1, duration_s=6)[0]
    with pytest.raises(ValueError):
        H.build_concert([song])
    with pytest.raises(ValueError):
        H.build_concert([song, AudioBuffer(np.zeros(8000 * 6), 8000)])
    with pytest.raises(ValueError):
        H.build_concert([song, AudioBuffer(np.ones(8000 * 4), 8000)])


def test_simulation_levels(material):
    _, _, _, concert, noise, irs = material
    recs = {lv: H.simulate_recording(concert, lv, noise, irs, seed=1) for lv in H.LEVEL_SNR_DB}
    again = H.simulate_recording(concert, "mid", noise, irs, seed=1)
    assert again.audio.samples.tobytes() == recs["mid"].audio.samples.tobytes()
    clean = concert.audio.samples
    corr = {lv: abs(np.corrcoef(clean, r.audio.samples)[0, 1]) for lv, r in recs.items()}
    assert corr["low"] > corr["mid"] > corr["high"]
    for r in recs.values():
        assert r.song_boundaries == concert.song_boundaries
        assert len(r.audio) == len(concert.audio)
    # the microphone band limit strips the sub-100 Hz region
    def low_share(x):
        p = np.abs(np.fft.rfft(x)) ** 2
        return p[np.fft.rfftfreq(len(x), 1 / 8000) < 100].sum() / p.sum()
    assert low_share(recs["low"].audio.samples) < 0.1 * low_share(clean)


def test_simulation_errors(material):
    _, _, _, concert, noise, irs = material
    with pytest.raises(ValueError):
        H.simulate_recording(concert, "extreme", noise, irs)
    with pytest.raises(ValueError):
        H.simulate_recording(concert, "low", [], irs)
    with pytest.raises(ValueError):
        H.simulate_recording(concert, "low", noise, [])


def test_queries_inside_songs(material):
    concert = material[3]
    for L in (1, 5, 10):
        qs = H.draw_queries(concert, L, 50, seed=3)
        assert qs == H.draw_queries(concert, L, 50, seed=3)
        for q in qs:
            idx = [b[0] for b in concert.song_boundaries].index(q.song_id)
            _, a, b = concert.song_span(idx)
            assert a <= q.start_sample and q.start_sample + L * 8000 <= b
    assert H.draw_queries(concert, 5, 0, seed=0) == []
    with pytest.raises(ValueError):
        H.draw_queries(concert, 13, 1, seed=0)


def test_proposed_eval_rows(material):
    _, emb, index, concert, _, _ = material
    rep = H.run_proposed_eval(concert, index, emb, (1, 5), 20, seed=0, model_tag="spec")
    assert [(r["query_len_s"], r["metric_name"], r["n_queries"]) for r in rep.rows] == \
           [(1, "accuracy", 20), (5, "accuracy", 20)]
    assert all(0 <= r["value"] <= 100 for r in rep.rows)
    assert H.run_proposed_eval(concert, index, emb, (1, 5), 0).rows == []
    again = H.run_proposed_eval(concert, index, emb, (1, 5), 20, seed=0, model_tag="spec")
    assert again.to_json() == rep.to_json()


def test_identify_fn_eval(material):
    concert = material[3]
    rep = H.evaluate_song_accuracy(concert, lambda clip: None, (2,), 10, 0, "none", H.EvalReport())
    assert rep.value(query_len_s=2) == 0.0
    truth = iter(q.song_id for q in H.draw_queries(concert, 2, 10, 0))
    rep = H.evaluate_song_accuracy(concert, lambda clip: next(truth), (2,), 10, 0, "oracle", H.EvalReport())
    assert rep.value(query_len_s=2) == 100.0


def test_baseline_eval_rows(material):
    songs, emb, index, _, noise, _ = material
    rep = H.run_baseline_eval(songs, index, emb, (float("inf"), 5), (1, 2), noise, 8, seed=2)
    cells = {(r["level_or_snr"], r["query_len_s"]) for r in rep.rows}
    assert cells == {("inf", 1), ("inf", 2), (5.0, 1), (5.0, 2)}
    assert len(rep.rows) == 12
    hit = [r for r in rep.rows if r["metric_name"] == "top1_hit_rate" and r["query_len_s"] == 2]
    assert all(r["n_queries"] == 8 * 3 for r in hit)  # three 1 s segments per 2 s query
    for snr, L in cells:
        # a position hit is also a song hit, so the hit rate is bounded by segment song accuracy
        row = {r["metric_name"]: r["value"] for r in rep.rows if (r["level_or_snr"], r["query_len_s"]) == (snr, L)}
        assert row["top1_hit_rate"] <= row["segment_song_accuracy"]
    with pytest.raises(ValueError):
        H.run_baseline_eval(songs, index, emb, (5,), (1,), (), 2)


def test_report_serialisation(tmp_path):
    rep = H.EvalReport(config={"b": 1, "a": [2, 3]})
    assert rep.config_hash == H.config_hash({"a": [2, 3], "b": 1})
    rep.add("m", "proposed", "low", 5, "accuracy", 87.5, 200)
    with pytest.raises(ValueError):
        rep.add("m", "proposed", "low", 5, "accuracy", 100.5, 200)
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert list(rows[0]) == list(H.REPORT_COLUMNS) and rows[0]["value"] == "87.5"
    rep.write(tmp_path / "run")
    assert json.loads((tmp_path / "run" / "report.json").read_text())["rows"][0]["value"] == 87.5


def test_quantization_sweep(material):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1200, 128))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    refs = [H.SegmentRef(i // 10, i % 10) for i in range(len(x))]
    base = IndexConfig(dim=128, code_bits=4, coarse_cells=4, nprobe=4, kmeans_iters=8)
    rep, sizes = H.quantization_sweep(x, refs, H.SWEEP_M_VALUES, H.self_recall_eval(x, refs, 100), base)
    assert [r["m"] for r in rep.rows] == list(H.SWEEP_M_VALUES)
    assert [r["code_length_bits"] for r in rep.rows] == [4 * m for m in H.SWEEP_M_VALUES]
    assert [s["code_bytes"] for s in sizes] == [1200 * m * 4 // 8 for m in H.SWEEP_M_VALUES]
    assert "m,code_length_bits,code_bytes,serialized_bytes" in H.sizes_csv(sizes)
    with pytest.raises(ValueError):
        H.quantization_sweep(x, refs, (4, 48), H.self_recall_eval(x, refs, 10), base)
