# %% [markdown]
# # Pretraining, saliency and attention insight
#
# Pretrain a reduced model, then collect attention and saliency over the k
# best-predicted runs.

# %%
from pathlib import Path

import numpy as np

from tshint.attribution import insight, saliency, write_heatmap
from tshint.data import SynthConfig, prepare, split, synthesize
from tshint.model import ModelConfig, PatchTSTRegressor
from tshint.training import TrainConfig, pretrain

OUT = Path("out")
OUT.mkdir(exist_ok=True)
runs = synthesize(SynthConfig(n_low=200, n_high=50, noise_std=1.0, wear_effect=40.0, seed=0))
sp = split(runs, 0.8, 0.5, seed=0)
pre, test = prepare(sp.pretrain, T=64), prepare(sp.test, T=64)
cfg = ModelConfig(T=64, d_model=16, n_heads=2, n_layers=2, ffn_dim=32, head_dims=(64, 16))
model, history = pretrain(PatchTSTRegressor(cfg), pre, TrainConfig(max_epochs=15))
y = np.array([s.target for s in test])
print("best epoch", history.best_epoch, "test RMSE", np.sqrt(np.mean((model.predict(test) - y) ** 2)))

# %% [markdown]
# Saliency is |d prediction / d input| per channel and time step.

# %%
s = saliency(model, test[0])
print(s.values.shape, "top channel", int(s.values.mean(axis=1).argmax()))

# %%
bundle = insight(model, pre, k=5)
print("top features", bundle.top_features, "top patches", bundle.top_patches)
write_heatmap(bundle.attention, OUT / "attention_insight.png", "attention, top 5", "key patch", "query patch")
write_heatmap(bundle.saliency, OUT / "saliency_insight.png", "saliency, top 5", "time step", "channel")
model.save(OUT / "model.ckpt", with_optimizer=False)
