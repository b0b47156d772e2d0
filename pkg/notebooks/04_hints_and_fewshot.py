# %% [markdown]
# # Hints and few-shot fine-tuning
#
# Turn the insight bundle into an attention hint, either heuristically or
# from a parsed model answer, and fine-tune on a few hard runs.
# Run 03_pretrain_and_insight.py first.

# %%
import numpy as np

from tshint.attribution import insight
from tshint.data import SynthConfig, prepare, split, synthesize
from tshint.hinting import HeuristicProvider, HintParams, heuristic_hint, parse_response, suggestion_to_hint
from tshint.model import PatchTSTRegressor
from tshint.training import TrainConfig, run_few_shot

model = PatchTSTRegressor.load("out/model.ckpt")
runs = synthesize(SynthConfig(n_low=200, n_high=50, noise_std=1.0, wear_effect=40.0, seed=0))
sp = split(runs, 0.8, 0.5, seed=0)
pre, pool, test = (prepare(x, T=64) for x in (sp.pretrain, sp.shot_pool, sp.test))
bundle = insight(model, pre, k=5)
hint = heuristic_hint(bundle, HintParams())
print(hint.lam, np.round(hint.H[0], 2))

# %% [markdown]
# A free-text answer with a JSON object is parsed, validated and rasterised
# onto key patches.

# %%
text = '<think>ramp first</think> {"important_features": [[6, 0.9]], "important_timestep_ranges": [[0, 16, 1.0]], "rationale": "early ramp"}'
suggestion = parse_response(text, n_channels=19, T=64)
print(np.round(suggestion_to_hint(suggestion, model.config, HintParams()).H[0], 2))

# %%
records, tuned = run_few_shot(model, pool, 5, HeuristicProvider(bundle, HintParams()), test, TrainConfig())
for r in records:
    print(r.shot_index, r.sample_id, r.loss_before, r.loss_after, round(r.test_rmse, 3))
