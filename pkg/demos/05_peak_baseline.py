# %% [markdown]
# # Landmark hashing baseline
#
# Spectral peaks are paired inside a target zone and each pair becomes a 32-bit
# hash. A query matches the song whose hashes line up at one consistent offset.

# %%
import numpy as np

from afprint import augment, corpusgen, peakfp

songs = corpusgen.make_songs(20, seed_offset=100)
index = peakfp.PeakIndex()
for sid, s in enumerate(songs):
    index.add_song(sid, s)
print(len(index), "hashes")

# %%
print(hex(peakfp.pack_hash(100, 200, 50)), peakfp.unpack_hash(peakfp.pack_hash(100, 200, 50)))

# %% [markdown]
# A clean excerpt returns its song and its frame offset.

# %%
clip = songs[4].slice(93 * 256, 93 * 256 + 5 * 8000)
best = index.match(peakfp.fingerprint(clip))[0]
print(best)

# %% [markdown]
# Additive noise costs votes but rarely the answer for long queries.

# %%
noise = corpusgen.synth_noise("babble", 15, seed=3)
rng = np.random.default_rng(0)
long_clip = songs[4].slice(8000, 8000 * 11)
for snr in (20, 10, 0):
    noisy = augment.mix_at_snr(long_clip, noise, snr, rng)
    ranked = index.match(peakfp.fingerprint(noisy))
    print(snr, "dB ->", ranked[0].song_id if ranked else None, "votes", ranked[0].votes if ranked else 0)
