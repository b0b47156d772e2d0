# %% [markdown]
# # Tape autodiff and hinted attention
#
# Gradients come from a small reverse-mode tape over numpy arrays. The
# attention hint is added after the softmax: A_hat = A + lambda * H.

# %%
import numpy as np

from tshint import autodiff as ad
from tshint.autodiff import Tensor, grad_check
from tshint.model import AttentionHint, ModelConfig, PatchTSTRegressor, attention

x = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), True)
loss = ad.sum(ad.mul(ad.softmax_rows(x), x))
grads = ad.backward(loss, [x])
print(grads[x])
print("finite-difference rel err", grad_check(lambda t: ad.sum(ad.mul(ad.softmax_rows(t), t)), x.data))

# %% [markdown]
# With zero queries and keys the softmax is uniform, so the hinted matrix is
# easy to check by hand.

# %%
_, A, A_hat = attention(np.zeros((2, 1)), np.zeros((2, 1)), np.eye(2), AttentionHint(np.eye(2), 0.5))
print(A.data)
print(A_hat.data)

# %% [markdown]
# A hint with lambda = 0 leaves predictions untouched.

# %%
cfg = ModelConfig(n_channels=19, T=32, patch_len=8, stride=4, d_model=8, n_heads=2, n_layers=2,
                  ffn_dim=16, head_dims=(16, 8))
model = PatchTSTRegressor(cfg)
rng = np.random.default_rng(0)
xb, stats = rng.normal(size=(2, 19, 32)), rng.normal(size=(2, 19, 2))
plain, _ = model(xb, stats)
inert, _ = model(xb, stats, AttentionHint(rng.uniform(size=(cfg.n_patches,) * 2), 0.0))
print(np.abs(plain.data - inert.data).max())
