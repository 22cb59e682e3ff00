# %% [markdown]
# # Stored statistics versus re-running training batches
#
# The conventional way to draw an MC sample pushes a fresh training batch
# through the network alongside the test image, so the test image is
# normalised with that batch's moments. Storing the per-layer moments once
# gives the same samples without the training crops at test time.
#
# We show both return the same numbers when they draw the same batches, and
# time them as T grows.

# %%
import time

import numpy as np

from mcbn_sr import data, mcbn
from mcbn_sr import network as N

rng = np.random.default_rng(3)
params = N.build_network(N.NetworkConfig(depth=6, channels=16), rng)
train = [data.make_interpolated_lr(data.synthetic_image(128, 128, np.random.default_rng(i)), 2) for i in range(4)]
test = data.make_interpolated_lr(data.synthetic_image(96, 96, np.random.default_rng(99)), 2)

# %% [markdown]
# ## Same batches, same samples
# Both paths consume an identically seeded generator. The naive path crops
# batch members at the test image's size, so the stats estimation does too.

# %%
stats = mcbn.estimate_stats_sets(params, train, 5, 8, test.shape, np.random.default_rng(11))
fast = mcbn.mc_infer_fast(params, test, stats)
naive = mcbn.mc_infer_naive(params, test, train, 5, 8, np.random.default_rng(11))
print("max |fast - naive| over samples:", np.abs(fast.samples - naive.samples).max())

# %% [markdown]
# ## Timing
# The fast path costs one forward pass per sample. The naive path also pays
# for the eight training crops in every sample.

# %%
stats = mcbn.estimate_stats_sets(params, train, 15, 8, test.shape, np.random.default_rng(12))
for t in (5, 10, 15):
    start = time.perf_counter()
    mcbn.mc_infer_fast(params, test, stats, t)
    fast_s = time.perf_counter() - start
    start = time.perf_counter()
    mcbn.mc_infer_naive(params, test, train, t, 8, np.random.default_rng(t))
    naive_s = time.perf_counter() - start
    print(f"T={t:2d}  naive {naive_s:6.2f}s  fast {fast_s:5.2f}s  ratio {naive_s / fast_s:4.1f}")
