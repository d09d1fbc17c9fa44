# %% [markdown]
# # Synthetic songs, segments and mel features
#
# Every demo runs on seeded synthetic audio, so nothing has to be downloaded.
# This one builds a song, cuts it into overlapping 1 s windows and turns a
# window into the 256 x 32 log-mel image the encoder consumes.

# %%
import numpy as np

from afprint import corpusgen, dsp

song = corpusgen.synth_song(corpusgen.SynthSongSpec(seed=7, duration_s=30))
print(song.sample_rate_hz, "Hz,", len(song), "samples,", song.duration_s, "s")

# %% [markdown]
# Windows are 1 s long with a 0.5 s hop, so an L second clip gives 2L - 1 segments.

# %%
segments = dsp.segment_matrix(song)
print("segments:", segments.shape)
print("180 s song ->", dsp.segment_count(180 * dsp.SAMPLE_RATE), "segments")

# %% [markdown]
# The filterbank has 256 area-normalised triangles spanning 0 Hz to the 4 kHz Nyquist limit.

# %%
fb, centres = dsp.mel_filterbank()
print("filterbank", fb.shape, "first centres (Hz):", np.round(centres[:4], 1))

spec = dsp.mel_spectrogram(dsp.AudioBuffer(segments[10], dsp.SAMPLE_RATE))
print("log-mel", spec.values.shape, "range", spec.values.min().round(2), spec.values.max().round(2))

# %% [markdown]
# Loud frames dominate: the brightest mel band in each frame tracks the melody.

# %%
print(np.argmax(spec.values, axis=0))
