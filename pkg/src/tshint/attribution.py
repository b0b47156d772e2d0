"""Gradient saliency, top-k insight aggregation and map diffing."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import PatchTSTRegressor, forward


@dataclass
class SaliencyMap:
    values: np.ndarray  # (C, T), >= 0
    sample_id: str
    checkpoint: str = ""


def saliency(model: PatchTSTRegressor, sample) -> SaliencyMap:
    """``|d prediction / d input|`` over the normalised ``(C, T)`` input."""
    x = Tensor(sample.values[None].copy(), requires_grad=True)
    z, _ = model(x, sample.norm_stats[None])
    pred = ad.scale(ad.sum(z), model.target_std)
    grad = ad.backward(pred, [x])[x][0]
    if not np.isfinite(grad).all():
        raise ad.NonFiniteError(f"saliency for {sample.run_id}: non-finite gradient")
    return SaliencyMap(np.abs(grad), sample.run_id)


def function_saliency(f, x) -> np.ndarray:
    """Saliency of an arbitrary scalar graph builder ``f(Tensor) -> Tensor``."""
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    return np.abs(ad.backward(f(leaf), [leaf])[leaf])


def rank_by_error(ids: Sequence[str], errors: Sequence[float], k: int) -> list[str]:
    """The ``k`` ids with smallest error; ties go to the lexicographically smaller id."""
    if not 0 < k <= len(ids):
        raise ValueError(f"k={k} must be in [1, {len(ids)}]")
    order = sorted(range(len(ids)), key=lambda i: (abs(errors[i]), ids[i]))
    return [ids[i] for i in order[:k]]


def top_k_best(model: PatchTSTRegressor, samples: Sequence, k: int = 5) -> list[str]:
    pred = model.predict(samples)
    errors = np.abs(pred - np.array([s.target for s in samples]))
    return rank_by_error([s.run_id for s in samples], errors, k)


@dataclass
class InsightBundle:
    attention: np.ndarray  # (N_p, N_p)
    saliency: np.ndarray  # (C, T)
    top_features: list[int]
    top_timesteps: list[int]
    top_patches: list[int]
    sample_ids: list[str]
    layer: int = -1
    checkpoint: str = ""

    @property
    def feature_mass(self) -> np.ndarray:
        return self.saliency.mean(axis=1)

    @property
    def timestep_mass(self) -> np.ndarray:
        return self.saliency.mean(axis=0)

    @property
    def patch_mass(self) -> np.ndarray:
        return self.attention.sum(axis=0)


def _ranked(mass: np.ndarray) -> list[int]:
    return sorted(range(len(mass)), key=lambda i: (-mass[i], i))


def aggregate_insight(attention_maps: Sequence[np.ndarray], saliency_maps: Sequence[np.ndarray],
                      sample_ids: Sequence[str] = (), layer: int = -1) -> InsightBundle:
    """Entrywise means of per-sample maps plus the rankings derived from them.

    Features rank by mean saliency over time, timesteps by mean saliency over
    channels, and key patches by attention column mass.
    """
    att = np.mean(np.stack(attention_maps), axis=0)
    sal = np.mean(np.stack(saliency_maps), axis=0)
    return InsightBundle(
        attention=att,
        saliency=sal,
        top_features=_ranked(sal.mean(axis=1)),
        top_timesteps=_ranked(sal.mean(axis=0)),
        top_patches=_ranked(att.sum(axis=0)),
        sample_ids=list(sample_ids),
        layer=layer,
    )


def sample_attention(model: PatchTSTRegressor, sample, layer: int = -1) -> np.ndarray:
    """Pre-hint attention of one layer, averaged over heads and channels."""
    maps = forward(model, sample).maps
    return maps.pre[layer][0].mean(axis=(0, 1))


def insight(model: PatchTSTRegressor, samples: Sequence, k: int = 5, layer: int = -1) -> InsightBundle:
    """Average last-layer attention and saliency over the ``k`` best samples."""
    best = set(top_k_best(model, samples, k))
    chosen = sorted((s for s in samples if s.run_id in best), key=lambda s: s.run_id)
    att = [sample_attention(model, s, layer) for s in chosen]
    sal = [saliency(model, s).values for s in chosen]
    layer_idx = layer if layer >= 0 else model.config.n_layers + layer
    bundle = aggregate_insight(att, sal, [s.run_id for s in chosen], layer_idx)
    bundle.checkpoint = model.fingerprint()
    return bundle


def diff_maps(before: np.ndarray, after: np.ndarray) -> np.ndarray:
    before, after = np.asarray(before, dtype=np.float64), np.asarray(after, dtype=np.float64)
    if before.shape != after.shape:
        raise ValueError(f"map shapes differ: {before.shape} vs {after.shape}")
    return np.abs(after - before)


# --------------------------------------------------------------------------
# export


def write_matrix_csv(matrix: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(matrix):
            w.writerow([repr(float(v)) for v in row])
    return path


def read_matrix_csv(path: str | Path) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def write_heatmap(matrix: np.ndarray, path: str | Path, title: str = "",
                  xlabel: str = "", ylabel: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(np.atleast_2d(matrix), aspect="auto", cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return path


def export_map(matrix: np.ndarray, out_dir: str | Path, kind: str, checkpoint: str, sample_id: str,
               **labels) -> tuple[Path, Path]:
    """CSV + PNG pair named ``<kind>_<ckpt[:12]>_<sample>``."""
    stem = f"{kind}_{checkpoint[:12]}_{sample_id}"
    out_dir = Path(out_dir)
    return (
        write_matrix_csv(matrix, out_dir / f"{stem}.csv"),
        write_heatmap(matrix, out_dir / f"{stem}.png", title=f"{kind} ({sample_id})", **labels),
    )
