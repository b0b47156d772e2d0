"""Supervised pretraining, single-sample hinted fine-tuning and the N-shot loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evaluation import r2, rmse
from .model import AttentionHint, PatchTSTRegressor

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr_pretrain: float = 1e-3
    lr_finetune: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 60
    early_stop_patience: int = 10
    val_frac: float = 0.1
    finetune_steps: int = 5
    shot_selection: str = "max_error"  # or "random"
    finetune_scope: str = "encoder"  # "all", "encoder" or "head"
    resume_optimizer: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.lr_pretrain <= 0 or self.lr_finetune < 0:
            raise ValueError("learning rates must be positive")
        if self.lr_finetune >= self.lr_pretrain:
            raise ValueError("lr_finetune must be below lr_pretrain")
        if self.shot_selection not in ("max_error", "random"):
            raise ValueError(f"unknown shot_selection {self.shot_selection!r}")
        if self.finetune_scope not in FINETUNE_SCOPES:
            raise ValueError(f"unknown finetune_scope {self.finetune_scope!r}")


FINETUNE_SCOPES = ("all", "encoder", "head")


def scope_params(params: dict[str, Tensor], scope: str) -> dict[str, Tensor]:
    """Parameters updated during fine-tuning.

    ``encoder`` is everything upstream of the regression head (the part a
    hint acts on); ``head`` is the MLP head alone.
    """
    if scope == "all":
        return dict(params)
    is_head = {k: k.startswith("head.") for k in params}
    want = scope == "head"
    return {k: p for k, p in params.items() if is_head[k] == want}


try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _adam_update_numpy(p, g, m, v, b1, b2, step, eps):
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * (g * g)
    p -= step * m / (np.sqrt(v) + eps)


if numba is not None:
    @numba.njit(cache=True)
    def _adam_update(p, g, m, v, b1, b2, step, eps):  # pragma: no cover - compiled
        pf, gf, mf, vf = p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1)
        for i in range(pf.size):
            gi = gf[i]
            mi = b1 * mf[i] + (1.0 - b1) * gi
            vi = b2 * vf[i] + (1.0 - b2) * gi * gi
            mf[i] = mi
            vf[i] = vi
            pf[i] -= step * mi / (math.sqrt(vi) + eps)
else:  # pragma: no cover
    _adam_update = _adam_update_numpy


class Adam:
    """Adam over a dict of parameter tensors, updated in place.

    Bias correction is folded into the step size and epsilon, which is
    algebraically identical to the textbook update.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step = self.lr * math.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        eps_hat = self.eps * math.sqrt(1 - b2**self.t)
        for k, p in self.params.items():
            if not p.data.flags.c_contiguous or not p.data.flags.writeable:
                p.data = np.ascontiguousarray(p.data).copy()
            g = np.ascontiguousarray(grads[k], dtype=np.float64)
            _adam_update(p.data, g, self.m[k], self.v[k], b1, b2, step, eps_hat)

    def state(self) -> dict:
        return {"t": self.t, "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: state["m"][k].copy() for k in self.params}
        self.v = {k: state["v"][k].copy() for k in self.params}


def adam_reference(grad_fn: Callable[[float], float], x0: float, lr: float, steps: int,
                   beta1=0.9, beta2=0.999, eps=1e-8) -> list[float]:
    """Textbook scalar Adam, used to cross-check :class:`Adam`."""
    x, m, v, out = x0, 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(x)
    return out


def _batch(samples: Sequence):
    values = np.stack([s.values for s in samples])
    stats = np.stack([s.norm_stats for s in samples])
    return values, stats


def batch_loss(model: PatchTSTRegressor, samples: Sequence, hint: AttentionHint | None = None) -> Tensor:
    values, stats = _batch(samples)
    z, _ = model(values, stats, hint)
    target = Tensor(model.to_z([s.target for s in samples]))
    return ad.mse_loss(z, target)


def _grads(model: PatchTSTRegressor, loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    params = model.params if params is None else params
    g = ad.backward(loss, params.values())
    return {k: g[p] for k, p in params.items()}


def eval_loss(model, samples, hint=None, batch_size: int = 64) -> float:
    total = 0.0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        total += batch_loss(model, chunk, hint).item() * len(chunk)
    return total / len(samples)


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1


def pretrain(model: PatchTSTRegressor, samples: Sequence, cfg: TrainConfig) -> tuple[PatchTSTRegressor, History]:
    """Fit ``model`` on ``samples`` with Adam and MSE on z-scored targets.

    A seeded ``val_frac`` slice is held out for early stopping; the weights
    from the best validation epoch are restored at the end.
    """
    cfg.validate()
    if not samples:
        raise ValueError("pretrain set is empty")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(samples))
    n_val = int(round(len(samples) * cfg.val_frac)) if len(samples) >= 10 else 0
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]

    model.fit_normalization(train)
    opt = Adam(model.params, cfg.lr_pretrain, cfg.beta1, cfg.beta2, cfg.adam_eps)
    hist = History()
    best, best_state, stale = math.inf, None, 0
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(len(train))
        total = 0.0
        for i in range(0, len(train), cfg.batch_size):
            chunk = [train[j] for j in perm[i : i + cfg.batch_size]]
            try:
                loss = batch_loss(model, chunk)
                grads = _grads(model, loss)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            total += loss.item() * len(chunk)
            opt.step(grads)
        hist.train_loss.append(total / len(train))
        if not math.isfinite(hist.train_loss[-1]):
            raise TrainingDiverged(f"epoch {epoch}: training loss is not finite")
        monitor = eval_loss(model, val) if val else hist.train_loss[-1]
        hist.val_loss.append(monitor)
        log.debug("epoch %d train %.5f val %.5f", epoch, hist.train_loss[-1], monitor)
        if monitor < best:
            best, stale, hist.best_epoch = monitor, 0, epoch
            best_state = ({k: p.data.copy() for k, p in model.params.items()}, opt.state())
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    if best_state is not None:
        weights, model.optimizer_state = best_state
        for k, p in model.params.items():
            p.data = weights[k]
    return model, hist


@dataclass
class ShotRecord:
    shot_index: int
    sample_id: str
    loss_before: float | None
    loss_after: float | None
    test_rmse: float | None = None
    test_r2: float | None = None
    provenance: str = "none"
    hint_lambda: float = 0.0
    hint: AttentionHint | None = field(default=None, repr=False)


def finetune_step(model: PatchTSTRegressor, sample, hint: AttentionHint | None, cfg: TrainConfig,
                  lr: float | None = None) -> ShotRecord:
    """A fixed number of Adam steps on one sample, hint active in every forward.

    Only the parameters in ``cfg.finetune_scope`` move. With
    ``cfg.resume_optimizer`` optimisation continues from the moment estimates
    stored with the model (left there by :func:`pretrain`) at the reduced
    fine-tuning rate, and the updated estimates are written back.
    ``loss_before`` / ``loss_after`` are the hinted training loss on the
    sample. The model is updated in place.
    """
    lr = cfg.lr_finetune if lr is None else lr
    batch = [sample]
    loss_before = batch_loss(model, batch, hint).item()
    params = scope_params(model.params, cfg.finetune_scope)
    opt = Adam(params, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    state = model.optimizer_state
    if cfg.resume_optimizer and state is not None:
        opt.load_state(state)
    for _ in range(cfg.finetune_steps):
        loss = batch_loss(model, batch, hint)
        opt.step(_grads(model, loss, params))
    new = opt.state()
    if state is not None:
        new["m"] = {**state["m"], **new["m"]}
        new["v"] = {**state["v"], **new["v"]}
    if len(new["m"]) == len(model.params):
        model.optimizer_state = new
    loss_after = batch_loss(model, batch, hint).item()
    return ShotRecord(
        shot_index=-1,
        sample_id=sample.run_id,
        loss_before=loss_before,
        loss_after=loss_after,
        hint_lambda=0.0 if hint is None else hint.lam,
        hint=hint,
    )


def select_shots(model: PatchTSTRegressor, pool: Sequence, n_shots: int, strategy: str, seed: int) -> list:
    """Order in which shot-pool samples are used."""
    if strategy == "random":
        rng = np.random.default_rng(seed)
        return [pool[i] for i in rng.permutation(len(pool))[:n_shots]]
    err = np.abs(model.predict(pool) - np.array([s.target for s in pool]))
    order = sorted(range(len(pool)), key=lambda i: (-err[i], pool[i].run_id))
    return [pool[i] for i in order[:n_shots]]


def _test_metrics(model, test_set):
    y = np.array([s.target for s in test_set])
    pred = model.predict(test_set)
    return rmse(y, pred), r2(y, pred)


def run_few_shot(model: PatchTSTRegressor, shot_pool: Sequence, n_shots: int, hint_provider,
                 test_set: Sequence, cfg: TrainConfig) -> tuple[list[ShotRecord], PatchTSTRegressor]:
    """Sequential hinted fine-tuning, evaluating on ``test_set`` after every shot.

    Works on a copy of ``model``; updates carry over from shot to shot.
    ``hint_provider`` is called as ``provider(sample, model)`` and returns a
    :class:`~tshint.hinting.HintResult`, or is None for plain fine-tuning.
    Returns the records (0-shot first) and the fine-tuned copy.
    """
    cfg.validate()
    if n_shots > 0 and not shot_pool:
        raise ValueError("shot pool is empty")
    if n_shots > len(shot_pool):
        raise ValueError(f"n_shots {n_shots} exceeds shot pool size {len(shot_pool)}")
    model = model.copy()
    rec0 = ShotRecord(0, "", None, None, *_test_metrics(model, test_set))
    records = [rec0]
    shots = select_shots(model, shot_pool, n_shots, cfg.shot_selection, cfg.seed)
    for i, sample in enumerate(shots, start=1):
        if hint_provider is None:
            hint, provenance = None, "none"
        else:
            res = hint_provider(sample, model)
            hint, provenance = res.hint, res.provenance
        rec = finetune_step(model, sample, hint, cfg)
        rec.shot_index = i
        rec.provenance = provenance
        rec.test_rmse, rec.test_r2 = _test_metrics(model, test_set)
        log.info("shot %d (%s): loss %.4f -> %.4f, test rmse %.4f",
                 i, sample.run_id, rec.loss_before, rec.loss_after, rec.test_rmse)
        records.append(rec)
    return records, model


SHOT_COLUMNS = ("shot_index", "sample_id", "loss_before", "loss_after", "test_rmse",
                "test_r2", "provenance", "hint_lambda")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_shots_csv(records: Sequence[ShotRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SHOT_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in SHOT_COLUMNS])


def read_shots_csv(path: str | Path) -> list[dict]:
    """Rows of a shots file with numbers parsed and empty cells as None."""
    numeric = {"loss_before", "loss_after", "test_rmse", "test_r2", "hint_lambda"}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key, val in row.items():
            if key == "shot_index":
                row[key] = int(val)
            elif key in numeric:
                row[key] = float(val) if val != "" else None
    return rows
