"""Wafer-run ingestion, resampling, per-sample normalisation and synthesis.

Runs are stored PHM-2016 style: one CSV row per timestamp, keyed by
``run_id``, with a chamber column that determines the polishing mode.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CHANNELS: tuple[str, ...] = (
    "USAGE_OF_BACKING_FILM",
    "USAGE_OF_DRESSER",
    "USAGE_OF_POLISHING_TABLE",
    "USAGE_OF_DRESSER_TABLE",
    "PRESSURIZED_CHAMBER_PRESSURE",
    "MAIN_OUTER_AIR_BAG_PRESSURE",
    "CENTER_AIR_BAG_PRESSURE",
    "RETAINER_RING_PRESSURE",
    "RIPPLE_AIR_BAG_PRESSURE",
    "USAGE_OF_MEMBRANE",
    "USAGE_OF_PRESSURIZED_SHEET",
    "SLURRY_FLOW_LINE_A",
    "SLURRY_FLOW_LINE_B",
    "SLURRY_FLOW_LINE_C",
    "WAFER_ROTATION",
    "STAGE_ROTATION",
    "HEAD_ROTATION",
    "DRESSING_WATER_STATUS",
    "EDGE_AIR_BAG_PRESSURE",
)
N_CHANNELS = len(CHANNELS)

PRESSURE_CHANNEL = "CENTER_AIR_BAG_PRESSURE"
ROTATION_CHANNEL = "STAGE_ROTATION"

# Per-mode MRR bands in nm/min.
MRR_RANGE = {"LowSpeed": (55.0, 110.0), "HighSpeed": (140.0, 170.0)}

STATIC_COLUMNS = ("STAGE", "WAFER_ID", "MACHINE_ID")


class DataError(ValueError):
    """Malformed or unusable input data."""


class Mode(str, enum.Enum):
    LOW = "LowSpeed"
    HIGH = "HighSpeed"

    @classmethod
    def from_chamber(cls, chamber: int) -> "Mode":
        if chamber in (4, 5, 6):
            return cls.LOW
        if chamber in (1, 2, 3):
            return cls.HIGH
        raise DataError(f"unknown chamber id {chamber}")


@dataclass
class WaferRun:
    """One polishing run: ``channels`` is ``(19, L)``, row order as :data:`CHANNELS`."""

    run_id: str
    mode: Mode
    channels: np.ndarray
    target_mrr: float
    polishing_time: float
    chamber: int = 0
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[0] != N_CHANNELS:
            raise DataError(
                f"run {self.run_id}: expected {N_CHANNELS} channels, got shape {self.channels.shape}"
            )
        if self.channels.shape[1] < 2:
            raise DataError(f"run {self.run_id}: needs at least 2 timestamps")
        if not (math.isfinite(self.target_mrr) and self.target_mrr > 0):
            raise DataError(f"run {self.run_id}: target must be finite and positive")

    @property
    def length(self) -> int:
        return self.channels.shape[1]

    def channel(self, name: str) -> np.ndarray:
        return self.channels[CHANNELS.index(name)]


@dataclass
class SampleTensor:
    """Fixed-shape model input built from one run.

    ``norm_stats`` is ``(C, 2)`` holding the per-channel (mean, std) that were
    removed from the resampled series.
    """

    values: np.ndarray
    target: float
    run_id: str
    norm_stats: np.ndarray
    mode: Mode = Mode.LOW


@dataclass
class SynthConfig:
    n_low: int = 100
    n_high: int = 20
    length_range: tuple[int, int] = (64, 192)
    preston_k: float = 0.5
    noise_std: float = 0.0
    seed: int = 0
    # Additive nm/min swing driven by polishing-pad wear; 0 keeps the data
    # purely Preston.
    wear_effect: float = 0.0

    def validate(self) -> None:
        lo, hi = self.length_range
        if self.n_low < 0 or self.n_high < 0:
            raise DataError("run counts must be >= 0")
        if lo < 8 or hi < lo:
            raise DataError(f"infeasible length_range {self.length_range}")
        if not self.preston_k > 0:
            raise DataError("preston_k must be positive")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")


# --------------------------------------------------------------------------
# CSV IO


def load_runs(
    path: str | Path,
    schema: Sequence[str] = CHANNELS,
    targets_path: str | Path | None = None,
) -> list[WaferRun]:
    """Read PHM-style runs from ``path``.

    Targets come from a ``target_mrr`` column or, if absent, from a sidecar
    ``targets.csv`` (``run_id,target_mrr``) next to the file. Extra columns
    such as ``STAGE`` or ``WAFER_ID`` are accepted and ignored.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: no runs")
        col = {name: i for i, name in enumerate(header)}
        missing = [c for c in ("run_id", "timestamp", "chamber", *schema) if c not in col]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        has_target = "target_mrr" in col
        grouped: dict[str, list[tuple[float, int, list[float], float | None]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ts = float(row[col["timestamp"]])
                chamber = int(float(row[col["chamber"]]))
                vals = [float(row[col[c]]) for c in schema]
                tgt = float(row[col["target_mrr"]]) if has_target else None
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: non-numeric or missing cell ({exc})") from None
            grouped.setdefault(row[col["run_id"]], []).append((ts, chamber, vals, tgt))

    if not grouped:
        raise DataError(f"{path}: no runs")

    if not has_target:
        sidecar = Path(targets_path) if targets_path else path.with_name("targets.csv")
        if not sidecar.exists():
            raise DataError(f"{path}: no target_mrr column and no sidecar {sidecar}")
        with sidecar.open(newline="", encoding="utf-8") as fh:
            side = {r["run_id"]: float(r["target_mrr"]) for r in csv.DictReader(fh)}

    runs = []
    for run_id, rows in grouped.items():
        if len(rows) < 2:
            raise DataError(f"run {run_id}: only {len(rows)} timestamp(s); at least 2 required")
        rows.sort(key=lambda r: r[0])
        chambers = {r[1] for r in rows}
        if len(chambers) != 1:
            raise DataError(f"run {run_id}: chamber changes within run")
        chamber = chambers.pop()
        ts = np.array([r[0] for r in rows])
        target = rows[0][3] if has_target else side.get(run_id)
        if target is None:
            raise DataError(f"run {run_id}: no target in sidecar")
        runs.append(
            WaferRun(
                run_id=run_id,
                mode=Mode.from_chamber(chamber),
                channels=np.array([r[2] for r in rows]).T,
                target_mrr=target,
                polishing_time=float(ts[-1] - ts[0]),
                chamber=chamber,
                timestamps=ts,
            )
        )
    return runs


def write_runs(runs: Iterable[WaferRun], path: str | Path) -> None:
    """Write runs in the format :func:`load_runs` reads (float repr round-trips)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "timestamp", "chamber", *CHANNELS, "target_mrr"])
        for run in runs:
            ts = run.timestamps if run.timestamps is not None else np.arange(run.length, dtype=float)
            tgt = repr(float(run.target_mrr))
            for j in range(run.length):
                w.writerow(
                    [run.run_id, repr(float(ts[j])), run.chamber]
                    + [repr(float(v)) for v in run.channels[:, j]]
                    + [tgt]
                )


# --------------------------------------------------------------------------
# preprocessing


def resample_linear(series, T: int) -> np.ndarray:
    """Linearly interpolate ``series`` at ``j*(L-1)/(T-1)`` for ``j < T``."""
    series = np.asarray(series, dtype=np.float64)
    L = series.shape[-1]
    if L < 2 or T < 2:
        raise DataError(f"resample needs L >= 2 and T >= 2 (got L={L}, T={T})")
    pos = np.arange(T) * (L - 1) / (T - 1)
    return np.interp(pos, np.arange(L), series)


def normalize(values, eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel z-score of a ``(C, T)`` matrix.

    Returns the normalised matrix and ``(C, 2)`` (mean, std) stats. Constant
    channels map to zeros.
    """
    values = np.asarray(values, dtype=np.float64)
    mu = values.mean(axis=1)
    sd = values.std(axis=1)
    out = (values - mu[:, None]) / (sd[:, None] + eps)
    constant = np.ptp(values, axis=1) == 0
    out[constant] = 0.0
    sd[constant] = 0.0
    return out, np.stack([mu, sd], axis=1)


def to_sample(run: WaferRun, T: int = 128) -> SampleTensor:
    resampled = np.stack([resample_linear(ch, T) for ch in run.channels])
    values, stats = normalize(resampled)
    return SampleTensor(values, float(run.target_mrr), run.run_id, stats, run.mode)


def prepare(runs: Iterable[WaferRun], T: int = 128) -> list[SampleTensor]:
    return [to_sample(r, T) for r in runs]


# --------------------------------------------------------------------------
# synthesis


def _piecewise(rng: np.random.Generator, L: int, level: float, spread: float) -> np.ndarray:
    n_seg = int(rng.integers(2, 5))
    cuts = np.sort(rng.choice(np.arange(1, L), size=n_seg - 1, replace=False))
    levels = level * rng.uniform(1 - spread, 1 + spread, size=n_seg)
    out = np.empty(L)
    for seg, (a, b) in enumerate(zip(np.r_[0, cuts], np.r_[cuts, L])):
        out[a:b] = levels[seg]
    return out


def _usage(rng: np.random.Generator, L: int, start: float, rate: float) -> np.ndarray:
    steps = rng.exponential(rate, size=L - 1)
    return start + np.r_[0.0, np.cumsum(steps)]


# Usage-of-polishing-table start levels span [0, PAD_LIFE); wear_effect is
# applied against the run-mean usage on that scale.
PAD_LIFE = 400.0


def synthesize(cfg: SynthConfig) -> list[WaferRun]:
    """Generate runs obeying MRR = k * mean(pressure) * mean(rotation).

    Each run's Preston target is drawn uniformly inside its mode band; the
    pressure series is then shifted so the channel means reproduce it
    exactly. ``wear_effect`` and ``noise_std`` perturb the target afterwards.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    modes = [Mode.LOW] * cfg.n_low + [Mode.HIGH] * cfg.n_high
    order = rng.permutation(len(modes))
    lo_len, hi_len = cfg.length_range
    idx = {name: i for i, name in enumerate(CHANNELS)}
    runs = []
    for n, which in enumerate(order):
        mode = modes[which]
        L = int(rng.integers(lo_len, hi_len + 1))
        fast = mode is Mode.HIGH
        chamber = int(rng.choice([1, 2, 3] if fast else [4, 5, 6]))
        band = MRR_RANGE[mode.value]
        preston_mrr = rng.uniform(*band)

        ch = np.empty((N_CHANNELS, L))
        base_rot = rng.uniform(76.0, 84.0) if fast else rng.uniform(38.0, 42.0)
        for name, ratio in (("WAFER_ROTATION", 1.1), ("STAGE_ROTATION", 1.0), ("HEAD_ROTATION", 0.9)):
            ch[idx[name]] = base_rot * ratio + rng.normal(0.0, 0.4, L)
        v_mean = ch[idx[ROTATION_CHANNEL]].mean()

        p_target = preston_mrr / (cfg.preston_k * v_mean)
        p = _piecewise(rng, L, p_target, 0.12) + rng.normal(0.0, 0.03 * p_target, L)
        ch[idx[PRESSURE_CHANNEL]] = p + (p_target - p.mean())
        for name, ratio in (
            ("PRESSURIZED_CHAMBER_PRESSURE", 1.3),
            ("MAIN_OUTER_AIR_BAG_PRESSURE", 0.8),
            ("RETAINER_RING_PRESSURE", 1.6),
            ("RIPPLE_AIR_BAG_PRESSURE", 0.6),
            ("EDGE_AIR_BAG_PRESSURE", 0.7),
        ):
            ch[idx[name]] = _piecewise(rng, L, p_target * ratio, 0.1) + rng.normal(0.0, 0.05, L)

        pad_start = rng.uniform(0.0, PAD_LIFE)
        ch[idx["USAGE_OF_POLISHING_TABLE"]] = _usage(rng, L, pad_start, 0.05)
        for name, span, rate in (
            ("USAGE_OF_BACKING_FILM", 800.0, 0.1),
            ("USAGE_OF_DRESSER", 200.0, 0.02),
            ("USAGE_OF_DRESSER_TABLE", 300.0, 0.05),
            ("USAGE_OF_MEMBRANE", 150.0, 0.02),
            ("USAGE_OF_PRESSURIZED_SHEET", 600.0, 0.1),
        ):
            ch[idx[name]] = _usage(rng, L, rng.uniform(0.0, span), rate)

        for name in ("SLURRY_FLOW_LINE_A", "SLURRY_FLOW_LINE_B", "SLURRY_FLOW_LINE_C"):
            ch[idx[name]] = rng.uniform(15.0, 25.0) + rng.normal(0.0, 0.5, L)

        switch = int(rng.integers(1, L))
        water = np.zeros(L)
        water[switch:] = 1.0
        ch[idx["DRESSING_WATER_STATUS"]] = water if rng.random() < 0.5 else 1.0 - water

        target = cfg.preston_k * ch[idx[PRESSURE_CHANNEL]].mean() * ch[idx[ROTATION_CHANNEL]].mean()
        if cfg.wear_effect:
            wear = ch[idx["USAGE_OF_POLISHING_TABLE"]].mean() / PAD_LIFE
            target += cfg.wear_effect * (0.5 - wear)
        if cfg.noise_std:
            target += rng.normal(0.0, cfg.noise_std)
        target = max(float(target), 1e-3)

        dt = 1.0 + 0.5 * rng.random()
        ts = np.round(np.arange(L) * dt, 6)
        runs.append(
            WaferRun(
                run_id=f"run{n:05d}",
                mode=mode,
                channels=ch,
                target_mrr=target,
                polishing_time=float(ts[-1] - ts[0]),
                chamber=chamber,
                timestamps=ts,
            )
        )
    return runs


# --------------------------------------------------------------------------
# partitioning


def _floor(x: float) -> int:
    return int(math.floor(x + 1e-9))


def _allocate(total: int, sizes: Sequence[int]) -> list[int]:
    """Split ``total`` across strata proportionally (largest remainder)."""
    n = sum(sizes)
    exact = [total * s / n for s in sizes]
    alloc = [min(_floor(e), s) for e, s in zip(exact, sizes)]
    rema = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - alloc[i]), i))
    for i in rema:
        if sum(alloc) >= total:
            break
        if alloc[i] < sizes[i]:
            alloc[i] += 1
    return alloc



@dataclass
class Split:
    pretrain: list = field(default_factory=list)
    shot_pool: list = field(default_factory=list)
    test: list = field(default_factory=list)


def split(runs: Sequence, train_frac: float = 0.8, pretrain_frac: float = 0.15, seed: int = 0) -> Split:
    """Mode-stratified, seeded partition into pretrain / shot pool / test.

    ``floor(n * train_frac)`` runs form the training part, of which
    ``floor(n_train * pretrain_frac)`` go to pretraining and the rest to the
    shot pool. Items must expose ``mode`` and ``run_id``.
    """
    for name, frac in (("train_frac", train_frac), ("pretrain_frac", pretrain_frac)):
        if not 0.0 < frac < 1.0:
            raise DataError(f"{name} must be in (0, 1), got {frac}")
    n = len(runs)
    n_train = _floor(n * train_frac)
    n_pre = _floor(n_train * pretrain_frac)
    n_test = n - n_train
    if min(n_pre, n_train - n_pre, n_test) <= 0:
        raise DataError(
            f"split of {n} runs leaves an empty partition (pretrain={n_pre}, "
            f"shot_pool={n_train - n_pre}, test={n_test})"
        )
    rng = np.random.default_rng(seed)
    strata = [
        [r for r in sorted(runs, key=lambda r: r.run_id) if r.mode is m]
        for m in (Mode.LOW, Mode.HIGH)
    ]
    strata = [s for s in strata if s]
    shuffled = [[s[i] for i in rng.permutation(len(s))] for s in strata]
    test_q = _allocate(n_test, [len(s) for s in shuffled])
    train_parts = [s[q:] for s, q in zip(shuffled, test_q)]
    pre_q = _allocate(n_pre, [len(s) for s in train_parts])
    out = Split()
    for s, tq, part, pq in zip(shuffled, test_q, train_parts, pre_q):
        out.test.extend(s[:tq])
        out.pretrain.extend(part[:pq])
        out.shot_pool.extend(part[pq:])
    for part in (out.pretrain, out.shot_pool, out.test):
        part.sort(key=lambda r: r.run_id)
    return out
