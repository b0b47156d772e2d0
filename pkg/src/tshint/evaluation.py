"""Regression metrics, the Preston baseline and benchmark reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import PRESSURE_CHANNEL, ROTATION_CHANNEL, Mode


def _pair(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=np.float64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y_true.size == 0 or y_true.shape != y_pred.shape:
        raise ValueError(f"need equal non-zero lengths, got {y_true.size} and {y_pred.size}")
    return y_true, y_pred


def rmse(y_true, y_pred) -> float:
    y_true, y_pred = _pair(y_true, y_pred)
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def r2(y_true, y_pred) -> float:
    """Coefficient of determination against the mean of ``y_true``."""
    y_true, y_pred = _pair(y_true, y_pred)
    ss_tot = np.sum((y_true - y_true.mean()) ** 2)
    if ss_tot == 0:
        raise ValueError("r2 is undefined for constant y_true")
    return float(1.0 - np.sum((y_true - y_pred) ** 2) / ss_tot)


class PrestonFitError(ValueError):
    pass


@dataclass
class PrestonModel:
    """MRR = k * P * V with P, V the run means of two channels."""

    k: float
    pressure_channel: str = PRESSURE_CHANNEL
    velocity_channel: str = ROTATION_CHANNEL

    def pv(self, runs) -> np.ndarray:
        return np.array(
            [r.channel(self.pressure_channel).mean() * r.channel(self.velocity_channel).mean() for r in runs]
        )

    def predict(self, runs) -> np.ndarray:
        return self.k * self.pv(runs)

    __call__ = predict


def preston_fit(runs, pressure_channel: str = PRESSURE_CHANNEL,
                velocity_channel: str = ROTATION_CHANNEL) -> PrestonModel:
    """Least-squares k (no intercept): ``k = sum(mrr * pv) / sum(pv^2)``."""
    model = PrestonModel(0.0, pressure_channel, velocity_channel)
    pv = model.pv(runs)
    mrr = np.array([r.target_mrr for r in runs], dtype=np.float64)
    denom = float(np.dot(pv, pv))
    if denom == 0:
        raise PrestonFitError("every run has P*V == 0; k is undetermined")
    model.k = float(np.dot(mrr, pv) / denom)
    return model


class MeanPredictor:
    """Predicts the training-set mean target for every run."""

    def __init__(self, runs):
        self.value = float(np.mean([r.target_mrr for r in runs]))

    def __call__(self, runs) -> np.ndarray:
        return np.full(len(runs), self.value)


@dataclass
class EvalRow:
    model: str
    mode: str
    n: int
    rmse: float
    r2: float | None


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    config_hashes: dict = field(default_factory=dict)

    def get(self, model: str, mode: str = "all") -> EvalRow:
        for row in self.rows:
            if row.model == model and row.mode == mode:
                return row
        raise KeyError((model, mode))

    def to_dict(self) -> dict:
        return {
            "rows": [row.__dict__ for row in self.rows],
            "config_hashes": self.config_hashes,
        }

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out_dir / "report.json", out_dir / "report.csv"
        jpath.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        with cpath.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "mode", "n", "rmse", "r2"])
            for row in self.rows:
                w.writerow([row.model, row.mode, row.n, repr(row.rmse),
                            "" if row.r2 is None else repr(row.r2)])
        return jpath, cpath


def bench(models: Mapping[str, Callable], test_runs: Sequence, config_hashes: dict | None = None) -> EvalReport:
    """Score every predictor on the same runs, per mode and overall.

    Each predictor maps a list of runs to an array of predicted MRR. R2 is
    reported as None where the targets of a slice are constant.
    """
    y = np.array([r.target_mrr for r in test_runs], dtype=np.float64)
    modes = np.array([r.mode.value for r in test_runs])
    report = EvalReport(config_hashes=dict(config_hashes or {}))
    for name, predict in models.items():
        pred = np.asarray(predict(test_runs), dtype=np.float64)
        slices = [("all", np.ones(len(y), bool))] + [
            (m.value, modes == m.value) for m in Mode if (modes == m.value).any()
        ]
        for label, mask in slices:
            yt, yp = y[mask], pred[mask]
            score = r2(yt, yp) if np.ptp(yt) > 0 else None
            report.rows.append(EvalRow(name, label, int(mask.sum()), rmse(yt, yp), score))
    return report
