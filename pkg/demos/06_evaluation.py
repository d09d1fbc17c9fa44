# %% [markdown]
# # Simulated recording protocol
#
# Songs are joined into one long concert. A phone recording is simulated by
# reverberation, a noise bed at a fixed SNR per level and the microphone's
# band limit. Queries are random windows that never straddle two songs.
#
# A briefly trained encoder keeps this demo fast, so expect modest numbers.

# %%
import numpy as np

from afprint import augment, corpusgen, encoder, evalharness, peakfp
from afprint.pqindex import IndexConfig

songs = corpusgen.make_songs(20, seed_offset=10_000)
noise, irs = corpusgen.make_noise_pool(3), corpusgen.make_ir_pool(3)
concert = evalharness.build_concert(songs)
recs = {lv: evalharness.simulate_recording(concert, lv, noise, irs) for lv in evalharness.LEVEL_SNR_DB}
print({lv: r.snr_db for lv, r in recs.items()})

# %%
train = encoder.train(corpusgen.make_songs(50), corpusgen.make_noise_pool(1), corpusgen.make_ir_pool(1),
                      augment.AugmentConfig(), encoder.TrainConfig(epochs=5, steps_per_epoch=8))
emb = encoder.EncoderEmbedder(train.params)
index = evalharness.build_song_index(songs, emb, IndexConfig(m=16, code_bits=6, coarse_cells=8))

# %% [markdown]
# Song accuracy per level and query length.

# %%
report = evalharness.EvalReport()
for lv, rec in recs.items():
    evalharness.run_proposed_eval(rec, index, emb, (2, 5, 10), 40, report=report)
print(report.to_csv())

# %% [markdown]
# The landmark baseline on the same queries.

# %%
peaks = peakfp.PeakIndex()
for sid, s in enumerate(songs):
    peaks.add_song(sid, s)
rep = evalharness.EvalReport()
for lv, rec in recs.items():
    evalharness.evaluate_song_accuracy(rec, peaks.identify, (2, 5, 10), 40, 0, "peaks", rep)
print(rep.to_csv())

# %% [markdown]
# The offline protocol adds noise to clean excerpts and also scores each 1 s
# segment's nearest neighbour against its true position (Top-1 hit rate).

# %%
off = evalharness.run_baseline_eval(songs, index, emb, (0, 10), (2, 5), noise, 40)
for r in off.rows:
    print(r["level_or_snr"], r["query_len_s"], r["metric_name"], round(r["value"], 1))
