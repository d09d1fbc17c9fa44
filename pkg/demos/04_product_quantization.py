# %% [markdown]
# # Compressing embeddings with IVF-PQ
#
# A coarse k-means splits the database into cells. Residuals are cut into m
# subvectors, each replaced by the index of its nearest sub-centroid. A
# vector then costs m bytes, and search uses table lookups (ADC).

# %%
import numpy as np

from afprint import evalharness, pqindex
from afprint.dsp import SegmentRef

rng = np.random.default_rng(0)
centres = rng.normal(size=(100, 64))
x = centres[rng.integers(100, size=6000)] + 0.4 * rng.normal(size=(6000, 64))
x /= np.linalg.norm(x, axis=1, keepdims=True)
refs = [SegmentRef(i // 59, i % 59) for i in range(len(x))]

# %% [markdown]
# More sub-quantizers mean longer codes and smaller reconstruction error.

# %%
base = pqindex.IndexConfig(coarse_cells=16, nprobe=4, kmeans_iters=10)
report, sizes = evalharness.quantization_sweep(x, refs, (4, 8, 16, 32), evalharness.self_recall_eval(x, refs),
                                               base)
for row, size in zip(report.rows, sizes):
    print(f"m={row['m']:3d} bits={row['code_length_bits']:4d} recall@1={row['value']:5.1f}% "
          f"codes={size['code_bytes']} B file={size['serialized_bytes']} B")

# %% [markdown]
# The file layout is fixed, so its size is a closed formula.

# %%
index = pqindex.FingerprintIndex.build(x, refs, pqindex.IndexConfig(coarse_cells=16))
print(index.size_report()[1] == pqindex.expected_serialized_size(index.config, len(x)))
print("at 58,879,329 vectors the codes need", pqindex.code_bytes(58_879_329, 32) / 1e9, "GB")
