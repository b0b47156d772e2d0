"""Channel-independent patch transformer with hint-injectable attention.

Each channel is split into overlapping patches and encoded on its own with
shared weights. Attention on selected layers can be biased after the
softmax by ``A + lambda * H``. An MLP head maps the flattened encodings of
all channels to one scalar.

Because inputs are z-scored per sample, the per-channel (mean, std) removed
by normalisation are embedded and added to every patch token of that
channel; otherwise absolute process levels would be invisible to the model.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"TSHINTCK"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_channels: int = 19
    T: int = 128
    patch_len: int = 16
    stride: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 3
    ffn_dim: int = 128
    head_dims: tuple[int, ...] = (1024, 512, 256, 128, 64, 32)
    hint_layers: tuple[int, ...] | None = None  # None: every layer
    activation: str = "gelu"  # encoder FFN only; the head is ReLU
    renormalize_hint: bool = False
    seed: int = 0

    def __post_init__(self):
        self.head_dims = tuple(int(d) for d in self.head_dims)
        if self.hint_layers is not None:
            self.hint_layers = tuple(sorted(int(i) for i in self.hint_layers))
        self.validate()

    @property
    def n_patches(self) -> int:
        return (self.T - self.patch_len) // self.stride + 1

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def flat_dim(self) -> int:
        return self.n_channels * self.n_patches * self.d_model

    def hinted(self, layer: int) -> bool:
        return self.hint_layers is None or layer in self.hint_layers

    def validate(self) -> None:
        if self.patch_len > self.T or (self.T - self.patch_len) % self.stride:
            raise ConfigError(
                f"stride {self.stride} must divide T - patch_len = {self.T - self.patch_len}"
            )
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if any(d < 1 for d in self.head_dims):
            raise ConfigError(f"head_dims must be positive, got {self.head_dims}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.hint_layers is not None and any(
            not 0 <= i < self.n_layers for i in self.hint_layers
        ):
            raise ConfigError(f"hint_layers {self.hint_layers} outside [0, {self.n_layers})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_dims"] = list(self.head_dims)
        d["hint_layers"] = None if self.hint_layers is None else list(self.hint_layers)
        return d


@dataclass
class AttentionHint:
    """Additive post-softmax attention bias ``lam * H``; ``H`` is ``N_p x N_p`` in [0, 1]."""

    H: np.ndarray
    lam: float = 0.1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        if self.H.ndim != 2 or self.H.shape[0] != self.H.shape[1]:
            raise ValueError(f"hint matrix must be square, got {self.H.shape}")
        if self.H.size and (self.H.min() < 0 or self.H.max() > 1):
            raise ValueError("hint entries must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("hint lambda must be >= 0")

    @property
    def inert(self) -> bool:
        return self.lam == 0 or not self.H.any()


@dataclass
class AttentionMaps:
    """Per-layer attention arrays shaped ``(B, C, heads, N_p, N_p)``.

    ``hinted[i]`` is None on layers where no hint was applied.
    """

    pre: list[np.ndarray]
    hinted: list[np.ndarray | None]

    def get(self, layer: int, head: int, channel: int, sample: int = 0, hinted: bool = False):
        src = self.hinted[layer] if hinted and self.hinted[layer] is not None else self.pre[layer]
        return src[sample, channel, head]


# --------------------------------------------------------------------------
# building blocks


def patchify(values, cfg: ModelConfig) -> Tensor:
    """``(..., C, T) -> (..., C, N_p, patch_len)``; patch j starts at ``j*stride``."""
    values = values if isinstance(values, Tensor) else Tensor(values)
    if values.shape[-2:] != (cfg.n_channels, cfg.T):
        raise ValueError(
            f"expected trailing shape ({cfg.n_channels}, {cfg.T}), got {values.shape}"
        )
    return ad.unfold(values, cfg.patch_len, cfg.stride)


def attention(q, k, v, hint: AttentionHint | None = None, renormalize: bool = False):
    """Scaled dot-product attention over the last two axes.

    Returns ``(context, A, A_hat)``. ``A_hat = A + lam * H`` with H held
    constant; it is ``A`` itself when no (or an inert) hint is given.
    """
    q, k, v = (x if isinstance(x, Tensor) else Tensor(x) for x in (q, k, v))
    n, d_k = q.shape[-2], q.shape[-1]
    A = ad.softmax_rows(ad.scale(q @ ad.transpose(k), 1.0 / np.sqrt(d_k)))
    A_hat = A
    if hint is not None:
        if hint.H.shape != (n, k.shape[-2]):
            raise ValueError(f"hint shape {hint.H.shape} does not match attention {(n, k.shape[-2])}")
        if hint.lam != 0:
            A_hat = ad.add(A, hint.lam * hint.H)
            if renormalize:
                A_hat = ad.div(A_hat, ad.sum(A_hat, axis=-1, keepdims=True))
    return A_hat @ v, A, A_hat


def _linear(x: Tensor, p: dict, name: str) -> Tensor:
    return ad.add(x @ p[f"{name}.W"], p[f"{name}.b"])


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Fan-in scaled uniform weights, zero biases, unit layernorm gains."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Tensor] = {}

    def linear(name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{name}.W"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True, f"{name}.W")
        params[f"{name}.b"] = Tensor(np.zeros(fan_out), True, f"{name}.b")

    def norm(name, dim):
        params[f"{name}.g"] = Tensor(np.ones(dim), True, f"{name}.g")
        params[f"{name}.b"] = Tensor(np.zeros(dim), True, f"{name}.b")

    d = cfg.d_model
    linear("embed", cfg.patch_len, d)
    linear("stat", 2, d)
    params["pos"] = Tensor(rng.uniform(-0.02, 0.02, (cfg.n_patches, d)), True, "pos")
    for i in range(cfg.n_layers):
        norm(f"layers.{i}.ln1", d)
        for m in ("q", "k", "v", "o"):
            linear(f"layers.{i}.attn.{m}", d, d)
        norm(f"layers.{i}.ln2", d)
        linear(f"layers.{i}.ffn1", d, cfg.ffn_dim)
        linear(f"layers.{i}.ffn2", cfg.ffn_dim, d)
    norm("final_ln", d)
    dims = [cfg.flat_dim, *cfg.head_dims, 1]
    for j in range(len(dims) - 1):
        linear(f"head.{j}", dims[j], dims[j + 1])
    return params


def encode(params: dict, cfg: ModelConfig, values, stat_feats=None, hint: AttentionHint | None = None):
    """Encode ``(B, C, T)`` inputs channel by channel.

    Returns ``(B, C, N_p, d_model)`` encodings and the attention maps.
    ``stat_feats`` is ``(B, C, 2)`` standardised per-channel level features.
    """
    values = values if isinstance(values, Tensor) else Tensor(values)
    B, C = values.shape[0], cfg.n_channels
    N, d, h, dk = cfg.n_patches, cfg.d_model, cfg.n_heads, cfg.d_k
    x = _linear(patchify(values, cfg), params, "embed")
    x = ad.add(x, params["pos"])
    if stat_feats is not None:
        s = _linear(Tensor(np.asarray(stat_feats, dtype=np.float64)), params, "stat")
        x = ad.add(x, ad.reshape(s, (B, C, 1, d)))
    x = ad.reshape(x, (B * C, N, d))
    act = ad.gelu if cfg.activation == "gelu" else ad.relu

    def heads(t):
        return ad.transpose(ad.reshape(t, (B * C, N, h, dk)), (0, 2, 1, 3))

    pre, hinted = [], []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        a = ad.layernorm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        q, k, v = (heads(_linear(a, params, f"{p}.attn.{m}")) for m in ("q", "k", "v"))
        layer_hint = hint if hint is not None and cfg.hinted(i) and not hint.inert else None
        ctx, A, A_hat = attention(q, k, v, layer_hint, cfg.renormalize_hint)
        pre.append(A.data.reshape(B, C, h, N, N))
        hinted.append(A_hat.data.reshape(B, C, h, N, N) if layer_hint is not None else None)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B * C, N, d))
        x = ad.add(x, _linear(ctx, params, f"{p}.attn.o"))
        a = ad.layernorm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        x = ad.add(x, _linear(act(_linear(a, params, f"{p}.ffn1")), params, f"{p}.ffn2"))
    x = ad.layernorm(x, params["final_ln.g"], params["final_ln.b"])
    return ad.reshape(x, (B, C, N, d)), AttentionMaps(pre, hinted)


def regress(params: dict, cfg: ModelConfig, encodings: Tensor) -> Tensor:
    """Flatten ``(B, C, N_p, d)`` and run the ReLU MLP head; returns ``(B,)``."""
    B = encodings.shape[0]
    x = ad.reshape(encodings, (B, cfg.flat_dim))
    n_hidden = len(cfg.head_dims)
    for j in range(n_hidden):
        x = ad.relu(_linear(x, params, f"head.{j}"))
    x = _linear(x, params, f"head.{n_hidden}")
    return ad.reshape(x, (B,))


# --------------------------------------------------------------------------
# model


@dataclass
class Prediction:
    prediction: float
    maps: AttentionMaps


class PatchTSTRegressor:
    """Weights plus the target and level-feature normalisation they were trained with."""

    def __init__(self, config: ModelConfig | None = None, params: dict | None = None):
        self.config = config or ModelConfig()
        self.params = params if params is not None else init_params(self.config)
        C = self.config.n_channels
        self.target_mean = 0.0
        self.target_std = 1.0
        self.stat_mean = np.zeros((C, 2))
        self.stat_std = np.ones((C, 2))
        # Adam moments ({"t", "m", "v"}) so fine-tuning resumes the optimiser.
        self.optimizer_state: dict | None = None

    # -- normalisation -----------------------------------------------------

    def fit_normalization(self, samples: Sequence) -> None:
        """Set target and level-feature statistics from training samples."""
        y = np.array([s.target for s in samples], dtype=np.float64)
        self.target_mean = float(y.mean())
        sd = float(y.std())
        self.target_std = sd if sd > 1e-12 else 1.0
        stats = np.stack([s.norm_stats for s in samples])
        self.stat_mean = stats.mean(axis=0)
        sd = stats.std(axis=0)
        self.stat_std = np.where(sd > 1e-12, sd, 1.0)

    def stat_features(self, norm_stats: np.ndarray) -> np.ndarray:
        return (np.asarray(norm_stats) - self.stat_mean) / self.stat_std

    def to_z(self, y):
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def from_z(self, z):
        return np.asarray(z) * self.target_std + self.target_mean

    # -- forward -----------------------------------------------------------

    def __call__(self, values, norm_stats, hint: AttentionHint | None = None):
        """Batched graph: ``(B, C, T)`` values -> z-space predictions ``(B,)`` and maps."""
        enc, maps = encode(self.params, self.config, values, self.stat_features(norm_stats), hint)
        return regress(self.params, self.config, enc), maps

    def encode(self, values, norm_stats, hint=None):
        return encode(self.params, self.config, values, self.stat_features(norm_stats), hint)

    def predict(self, samples: Sequence, hint: AttentionHint | None = None, batch_size: int = 32) -> np.ndarray:
        """Predictions in target units for a list of samples."""
        out = []
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            values = np.stack([s.values for s in chunk])
            stats = np.stack([s.norm_stats for s in chunk])
            z, _ = self(values, stats, hint)
            out.append(self.from_z(z.data))
        return np.concatenate(out) if out else np.zeros(0)

    # -- persistence -------------------------------------------------------

    def copy(self) -> "PatchTSTRegressor":
        clone = PatchTSTRegressor(
            copy.deepcopy(self.config),
            {k: Tensor(v.data.copy(), True, k) for k, v in self.params.items()},
        )
        clone.target_mean, clone.target_std = self.target_mean, self.target_std
        clone.stat_mean, clone.stat_std = self.stat_mean.copy(), self.stat_std.copy()
        if self.optimizer_state is not None:
            st = self.optimizer_state
            clone.optimizer_state = {"t": st["t"], "m": {k: a.copy() for k, a in st["m"].items()},
                                     "v": {k: a.copy() for k, a in st["v"].items()}}
        return clone

    def _named_arrays(self, with_optimizer: bool = True):
        for name, t in self.params.items():
            yield name, t.data
        if with_optimizer and self.optimizer_state is not None:
            for slot in ("m", "v"):
                for name in self.params:
                    yield f"adam.{slot}.{name}", self.optimizer_state[slot][name]

    def _chunks(self, with_optimizer: bool = True):
        arrays = list(self._named_arrays(with_optimizer))
        index, offset = [], 0
        for name, arr in arrays:
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
        header = {
            "format": "tshint-checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "target_norm": {"mean": self.target_mean, "std": self.target_std},
            "stat_norm": {"mean": self.stat_mean.tolist(), "std": self.stat_std.tolist()},
            "tensors": index,
            "dtype": "<f8",
            "adam_t": None if not with_optimizer or self.optimizer_state is None
            else int(self.optimizer_state["t"]),
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        yield CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes
        for _, arr in arrays:
            yield np.ascontiguousarray(arr, dtype="<f8").tobytes()

    def to_bytes(self, with_optimizer: bool = True) -> bytes:
        return b"".join(self._chunks(with_optimizer))

    def fingerprint(self) -> str:
        """Hash of the weights and normalisation (optimiser state excluded)."""
        h = hashlib.sha256()
        for chunk in self._chunks(with_optimizer=False):
            h.update(chunk)
        return h.hexdigest()

    def save(self, path: str | Path, with_optimizer: bool = True) -> str:
        """Write a checkpoint atomically and return its sha256."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        h = hashlib.sha256()
        with open(tmp, "wb") as fh:
            for chunk in self._chunks(with_optimizer):
                h.update(chunk)
                fh.write(chunk)
        tmp.replace(path)
        return h.hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PatchTSTRegressor":
        if data[:8] != CHECKPOINT_MAGIC:
            raise ValueError("not a tshint checkpoint")
        version, hlen = struct.unpack("<IQ", data[8:20])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(data[20 : 20 + hlen])
        body = np.frombuffer(data[20 + hlen :], dtype="<f8")
        params, moments = {}, {"m": {}, "v": {}}
        for entry in header["tensors"]:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arr = body[entry["offset"] : entry["offset"] + size].astype(np.float64).reshape(entry["shape"])
            name = entry["name"]
            if name.startswith("adam."):
                _, slot, pname = name.split(".", 2)
                moments[slot][pname] = arr
            else:
                params[name] = Tensor(arr, True, name)
        model = cls(ModelConfig(**header["config"]), params)
        if header.get("adam_t") is not None:
            model.optimizer_state = {"t": header["adam_t"], **moments}
        model.target_mean = header["target_norm"]["mean"]
        model.target_std = header["target_norm"]["std"]
        model.stat_mean = np.array(header["stat_norm"]["mean"])
        model.stat_std = np.array(header["stat_norm"]["std"])
        return model

    @classmethod
    def load(cls, path: str | Path) -> "PatchTSTRegressor":
        return cls.from_bytes(Path(path).read_bytes())


def forward(model: PatchTSTRegressor, sample, hint: AttentionHint | None = None) -> Prediction:
    """Single-sample prediction in target units plus its attention maps."""
    z, maps = model(sample.values[None], sample.norm_stats[None], hint)
    return Prediction(float(model.from_z(z.data)[0]), maps)
