# %% [markdown]
# # Distorting training segments
#
# A clean 1 s fragment is shifted in time, optionally reverberated and mixed
# with background noise. The extended pipeline then applies a random low-pass
# or high-pass roll-off filter to 40% of the fragments.

# %%
import numpy as np

from afprint import augment, corpusgen, dsp

song = corpusgen.synth_song(corpusgen.SynthSongSpec(seed=3))
noise = corpusgen.make_noise_pool(1)
irs = corpusgen.make_ir_pool(1)
seg = song.slice(8000 * 5, 8000 * 6)

# %% [markdown]
# Mixing hits the requested SNR exactly.

# %%
rng = np.random.default_rng(0)
for snr in (0, 5, 10):
    mixed = augment.mix_at_snr(seg, noise[0], snr, rng).samples
    resid = mixed - seg.samples
    print(snr, "dB ->", round(10 * np.log10(np.mean(seg.samples ** 2) / np.mean(resid ** 2)), 3))

# %% [markdown]
# Filter gains fall by the roll-off once per octave past the cutoff.

# %%
freqs = np.array([400.0, 800.0, 1600.0])
for order in (2, 4, 6):
    g = augment.butterworth_gain(freqs, 1600.0, order, augment.HIGH_PASS)
    print(f"{6 * order} dB/oct:", np.round(20 * np.log10(g), 1))

# %% [markdown]
# Both pipelines draw from the same seeded generator.

# %%
cfg = augment.AugmentConfig()
for name, fn in augment.PIPELINES.items():
    out = fn(seg, noise, irs, cfg, np.random.default_rng(4), context=song, start=8000 * 5)
    print(name, "rms", round(float(np.sqrt(np.mean(out.samples ** 2))), 4))

rng = np.random.default_rng(1)
drawn = [augment.sample_filter_spec(rng) for _ in range(2000)]
print("filtered share:", np.mean([d is not None for d in drawn]))
