# %% [markdown]
# # Contrastive training of the encoder
#
# Each batch holds N clean fragments from N different songs and their
# distorted copies. The loss pulls every pair together and pushes it away
# from the other 2N - 2 rows. This demo uses a short schedule; the full
# default (20 epochs x 16 steps of 32 pairs) takes a few minutes on one CPU.

# %%
import numpy as np

from afprint import augment, corpusgen, encoder
from afprint.dsp import log_mel_batch

songs = corpusgen.make_songs(50)
noise, irs = corpusgen.make_noise_pool(1), corpusgen.make_ir_pool(1)

# %% [markdown]
# The loss on a toy batch: identical rows give log(2N - 1).

# %%
z = np.tile(np.eye(4)[:1], (4, 1))
print(encoder.batch_loss(z, 0.05), np.log(3))

# %% [markdown]
# Analytic gradients agree with central differences.

# %%
params = encoder.init_params(seed=0)
x = log_mel_batch(np.random.default_rng(0).normal(size=(6, 8000)) * 0.1)
print("params:", params.n_params())
print("max relative gradient error:", encoder.gradient_check(params, x, 0.05, probe_count=10))

# %%
cfg = encoder.TrainConfig(epochs=4, steps_per_epoch=8, batch_pairs=16)
result = encoder.train(songs, noise, irs, augment.AugmentConfig(), cfg)
print("epoch losses:", np.round(result.loss_history, 3))

# %% [markdown]
# After training, a distorted fragment sits closer to its clean source than to other songs.

# %%
batch = encoder.make_batch(songs, noise, irs, augment.AugmentConfig(), 16, np.random.default_rng(9))
zc = encoder.forward_batch(log_mel_batch(batch.clean), result.params)
za = encoder.forward_batch(log_mel_batch(batch.augmented), result.params)
sim = za @ zc.T
print("mean positive", np.diag(sim).mean().round(3), "mean negative",
      ((sim.sum() - np.trace(sim)) / (sim.size - len(sim))).round(3))
