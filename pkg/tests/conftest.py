"""Shared desk-scale material for the acceptance suite.

Everything is rebuilt from seeds.  Setting ``AFPRINT_TEST_CACHE`` to a
directory keeps trained encoders between runs during development; the
recorded training time then comes from the cached run.
"""

import json
import os
import time
from pathlib import Path

import pytest

from afprint import augment, corpusgen, encoder, evalharness, peakfp
from afprint.pqindex import IndexConfig

DESK_SONGS = 100
DESK_SEED_OFFSET = 10_000
TRAIN_SONGS = 50
QUERIES = 200

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


class Timer:
    def __init__(self):
        self.seconds = {}

    def run(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        self.seconds[name] = time.perf_counter() - t0
        return out


@pytest.fixture(scope="session")
def timer():
    return Timer()


@pytest.fixture(scope="session")
def desk_songs(timer):
    return timer.run("desk_songs", corpusgen.make_songs, DESK_SONGS, DESK_SEED_OFFSET)


@pytest.fixture(scope="session")
def train_songs():
    return corpusgen.make_songs(TRAIN_SONGS, seed_offset=0)


@pytest.fixture(scope="session")
def pools():
    return {
        "noise_train": corpusgen.make_noise_pool(1), "ir_train": corpusgen.make_ir_pool(1),
        "noise_val": corpusgen.make_noise_pool(2), "ir_val": corpusgen.make_ir_pool(2),
        "noise_test": corpusgen.make_noise_pool(3), "ir_test": corpusgen.make_ir_pool(3),
    }


def _train(pipeline, songs, pools):
    cache = os.environ.get("AFPRINT_TEST_CACHE")
    cfg = encoder.TrainConfig(pipeline=pipeline)
    if cache:
        path = Path(cache) / f"encoder_{pipeline}.npz"
        meta = Path(cache) / f"encoder_{pipeline}.json"
        if path.exists() and meta.exists():
            m = json.loads(meta.read_text())
            return encoder.TrainResult(encoder.EncoderParams.load(path), m["loss_history"]), m["seconds"]
    t0 = time.perf_counter()
    result = encoder.train(songs, pools["noise_train"], pools["ir_train"], augment.AugmentConfig(), cfg)
    seconds = time.perf_counter() - t0
    if cache:
        Path(cache).mkdir(parents=True, exist_ok=True)
        result.params.save(path)
        meta.write_text(json.dumps({"loss_history": result.loss_history, "seconds": seconds}))
    return result, seconds


@pytest.fixture(scope="session")
def model_proposed(train_songs, pools):
    """Encoder trained with the filter-extended augmentation (result, training seconds)."""
    return _train("proposed", train_songs, pools)


@pytest.fixture(scope="session")
def model_baseline(train_songs, pools):
    """Identically seeded encoder trained with the baseline augmentation."""
    return _train("baseline", train_songs, pools)


@pytest.fixture(scope="session")
def concert(desk_songs, timer):
    return timer.run("concert", evalharness.build_concert, desk_songs)


@pytest.fixture(scope="session")
def recordings(concert, pools, timer):
    def make():
        return {lv: evalharness.simulate_recording(concert, lv, pools["noise_test"], pools["ir_test"], seed=0)
                for lv in evalharness.LEVEL_SNR_DB}
    return timer.run("recordings", make)


@pytest.fixture(scope="session")
def song_index_factory(desk_songs, timer):
    built = {}

    def get(tag, params):
        if tag not in built:
            emb = encoder.EncoderEmbedder(params)
            index = timer.run(f"index_{tag}", evalharness.build_song_index, desk_songs, emb, IndexConfig())
            built[tag] = (index, emb)
        return built[tag]
    return get


@pytest.fixture(scope="session")
def peak_index(desk_songs, timer):
    def make():
        index = peakfp.PeakIndex()
        for sid, song in enumerate(desk_songs):
            index.add_song(sid, song)
        return index
    return timer.run("peak_index", make)
