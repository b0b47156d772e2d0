# %% [markdown]
# # Wafer runs, resampling and the Preston baseline
#
# Synthesize CMP runs, look at one, resample to a fixed grid and fit the
# closed-form Preston baseline.

# %%
import numpy as np

from tshint.data import CHANNELS, SynthConfig, prepare, resample_linear, split, synthesize
from tshint.evaluation import preston_fit, r2, rmse

runs = synthesize(SynthConfig(n_low=160, n_high=40, noise_std=1.0, seed=0))
print(len(runs), "runs,", len(CHANNELS), "channels")
r = runs[0]
print(r.run_id, r.mode.value, "length", r.length, "MRR", round(r.target_mrr, 2))

# %% [markdown]
# Runs have different lengths. Linear resampling maps each onto T points and
# keeps both endpoints.

# %%
x = np.array([0.0, 2.0, 1.0])
print(resample_linear(x, 5))

samples = prepare(runs, T=128)
print(samples[0].values.shape, samples[0].norm_stats.shape)

# %% [markdown]
# Split into pretrain / shot pool / test and fit MRR = k * mean(P) * mean(V).

# %%
sp = split(runs, train_frac=0.8, pretrain_frac=0.15, seed=0)
print(len(sp.pretrain), len(sp.shot_pool), len(sp.test))
preston = preston_fit(sp.pretrain + sp.shot_pool)
y = [t.target_mrr for t in sp.test]
print("k =", preston.k)
print("test RMSE", rmse(y, preston.predict(sp.test)), "R2", r2(y, preston.predict(sp.test)))
