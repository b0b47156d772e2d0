"""Command-line entry point: ``tshint {synth,pretrain,fewshot,eval,explain,bench}``.

Every command writes ``manifest.json`` into ``--out`` listing the config
snapshot, seeds, input hashes and a hash for every produced file. Output
paths in the manifest are relative to ``--out``. Failures print a single
JSON line ``{"error": ..., "message": ...}`` to stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .attribution import diff_maps, export_map, insight, saliency, sample_attention, write_matrix_csv
from .data import Split, SynthConfig, load_runs, prepare, split, synthesize, write_runs
from .evaluation import MeanPredictor, bench, preston_fit, r2, rmse
from .hinting import HeuristicProvider, HintParams, LLMEndpointConfig, heuristic_hint, make_provider
from .model import ModelConfig, PatchTSTRegressor
from .training import TrainConfig, finetune_step, pretrain, run_few_shot, select_shots, write_shots_csv

log = logging.getLogger("tshint")

DEFAULT_CONFIG = {
    "seed": 0,
    "synth": dataclasses.asdict(SynthConfig(n_low=990, n_high=210, noise_std=1.0, wear_effect=40.0)),
    "split": {"train_frac": 1000 / 1200, "pretrain_frac": 0.15},
    "model": ModelConfig().to_dict(),
    "train": dataclasses.asdict(TrainConfig()),
    "hint": {"lambda": 0.1, "n_features": 3, "n_ranges": 3, "smooth_kernel": 3, "k": 5},
    "llm": {k: v for k, v in dataclasses.asdict(LLMEndpointConfig()).items() if k != "cache_dir"},
}
for _section in ("synth", "model", "train"):
    DEFAULT_CONFIG[_section].pop("seed", None)
DEFAULT_CONFIG["synth"]["length_range"] = list(DEFAULT_CONFIG["synth"]["length_range"])


class CLIError(Exception):
    pass


# --------------------------------------------------------------------------
# config


def load_config(path: str | None, seed: int | None = None) -> dict:
    """Defaults, overlaid with a YAML file, overlaid with ``--seed``.

    Unknown sections or keys are rejected.
    """
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path:
        with open(path, encoding="utf-8") as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise CLIError(f"config {path} must be a mapping")
        for key, val in user.items():
            if key not in cfg:
                raise CLIError(f"unknown config section {key!r}")
            if isinstance(cfg[key], dict):
                if not isinstance(val, dict):
                    raise CLIError(f"config section {key!r} must be a mapping")
                unknown = set(val) - set(cfg[key])
                if unknown:
                    raise CLIError(f"unknown keys in {key!r}: {sorted(unknown)}")
                cfg[key].update(val)
            else:
                cfg[key] = val
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def synth_config(cfg: dict) -> SynthConfig:
    s = dict(cfg["synth"])
    s["length_range"] = tuple(s["length_range"])
    return SynthConfig(seed=cfg["seed"], **s)


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(seed=cfg["seed"], **cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def hint_params(cfg: dict) -> HintParams:
    h = cfg["hint"]
    return HintParams(lam=h["lambda"], n_features=h["n_features"], n_ranges=h["n_ranges"],
                      smooth_kernel=h["smooth_kernel"])


# --------------------------------------------------------------------------
# manifest


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Collects inputs, outputs and metrics, then writes the manifest."""

    def __init__(self, command: str, args: argparse.Namespace, cfg: dict):
        self.command = command
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.args = {k: v for k, v in vars(args).items() if k not in ("func", "out", "config", "verbose")}
        for key in ("data", "checkpoint"):
            if isinstance(self.args.get(key), str):
                self.args[key] = Path(self.args[key]).name
            elif isinstance(self.args.get(key), list):
                self.args[key] = [Path(p).name for p in self.args[key]]
        self.inputs: dict[str, dict] = {}
        self.outputs: list[Path] = []
        self.metrics: dict = {}
        self.t0 = time.perf_counter()

    def input(self, role: str, path: Path) -> Path:
        self.inputs[role] = {"name": path.name, "sha256": sha256_file(path)}
        return path

    def output(self, path: Path) -> Path:
        self.outputs.append(Path(path))
        return path

    def finish(self) -> dict:
        manifest = {
            "tool": "tshint",
            "version": __version__,
            "command": self.command,
            "args": self.args,
            "config": self.cfg,
            "seeds": {"global": self.cfg["seed"]},
            "inputs": self.inputs,
            "outputs": {
                p.relative_to(self.out).as_posix(): sha256_file(p) for p in sorted(set(self.outputs))
            },
            "metrics": self.metrics,
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
        }
        (self.out / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return manifest


def _resolve(path: str, out: str) -> Path:
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    alt = Path(out) / p
    return alt if alt.exists() else p


def _load_split(run: Run, args, cfg) -> Split:
    data = run.input("data", _resolve(args.data, args.out))
    runs = load_runs(data)
    return split(runs, cfg["split"]["train_frac"], cfg["split"]["pretrain_frac"], cfg["seed"])


def _load_model(run: Run, path: str, role: str = "checkpoint") -> PatchTSTRegressor:
    model = PatchTSTRegressor.load(run.input(role, _resolve(path, run.out.as_posix())))
    if role == "checkpoint":
        # the checkpoint, not the config file, defines the architecture
        run.cfg["model"] = model.config.to_dict()
    return model


def _metrics(model, samples) -> dict:
    y = np.array([s.target for s in samples])
    p = model.predict(samples)
    return {"rmse": rmse(y, p), "r2": r2(y, p) if np.ptp(y) > 0 else None, "n": len(samples)}


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> dict:
    cfg = load_config(args.config, args.seed)
    run = Run("synth", args, cfg)
    runs = synthesize(synth_config(cfg))
    path = run.output(run.out / "runs.csv")
    write_runs(runs, path)
    run.metrics = {"n_runs": len(runs), "n_low": sum(r.mode.value == "LowSpeed" for r in runs)}
    return run.finish()


def cmd_pretrain(args) -> dict:
    cfg = load_config(args.config, args.seed)
    run = Run("pretrain", args, cfg)
    parts = _load_split(run, args, cfg)
    T = cfg["model"]["T"]
    pre = prepare(parts.pretrain, T)
    model = PatchTSTRegressor(model_config(cfg))
    model, hist = pretrain(model, pre, train_config(cfg))
    model.save(run.output(run.out / "model.ckpt"), with_optimizer=cfg["train"]["resume_optimizer"])
    with run.output(run.out / "history.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for i, (a, b) in enumerate(zip(hist.train_loss, hist.val_loss)):
            w.writerow([i, repr(a), repr(b)])
    split_ids = {k: [r.run_id for r in getattr(parts, k)] for k in ("pretrain", "shot_pool", "test")}
    path = run.output(run.out / "split.json")
    path.write_text(json.dumps(split_ids, indent=1) + "\n", encoding="utf-8")
    run.metrics = {
        "best_epoch": hist.best_epoch,
        "pretrain": _metrics(model, pre),
        "test": _metrics(model, prepare(parts.test, T)),
        "model_sha256": model.fingerprint(),
    }
    return run.finish()


def _parse_layers(text: str | None):
    if text is None:
        return "keep"
    if text.strip().lower() == "all":
        return None
    return tuple(int(t) for t in text.split(",") if t.strip())


def cmd_fewshot(args) -> dict:
    cfg = load_config(args.config, args.seed)
    if args.lam is not None:
        cfg["hint"]["lambda"] = args.lam
    run = Run("fewshot", args, cfg)
    model = _load_model(run, args.checkpoint)
    layers = _parse_layers(args.hint_layers)
    if layers != "keep":
        model.config.hint_layers = layers
        model.config.validate()
        cfg["model"] = model.config.to_dict()
    parts = _load_split(run, args, cfg)
    T = model.config.T
    pre, pool, test = prepare(parts.pretrain, T), prepare(parts.shot_pool, T), prepare(parts.test, T)
    params = hint_params(cfg)
    bundle = insight(model, pre, cfg["hint"]["k"]) if args.provider != "none" else None
    endpoint = LLMEndpointConfig.from_env(**cfg["llm"])
    if args.provider == "llm":
        endpoint.cache_dir = str(run.out / "transcripts")
    provider = make_provider(args.provider, bundle, params, endpoint)
    tcfg = train_config(cfg)
    records, tuned = run_few_shot(model, pool, args.shots, provider, test, tcfg)
    write_shots_csv(records, run.output(run.out / "shots.csv"))
    tuned.save(run.output(run.out / "finetuned.ckpt"), with_optimizer=False)
    if getattr(provider, "transcripts", None):
        tdir = run.out / "transcripts"
        for f in sorted(tdir.glob("*.json")) if tdir.exists() else []:
            run.output(f)
        log_path = run.output(run.out / "transcript_log.json")
        log_path.write_text(json.dumps(provider.transcripts, indent=1, sort_keys=True) + "\n",
                            encoding="utf-8")
    run.metrics = {
        "shots": [
            {"shot": r.shot_index, "sample_id": r.sample_id, "test_rmse": r.test_rmse,
             "test_r2": r.test_r2, "loss_before": r.loss_before, "loss_after": r.loss_after,
             "provenance": r.provenance}
            for r in records
        ],
        "finetuned_sha256": tuned.fingerprint(),
    }
    return run.finish()


def cmd_eval(args) -> dict:
    cfg = load_config(args.config, args.seed)
    run = Run("eval", args, cfg)
    model = _load_model(run, args.checkpoint)
    parts = _load_split(run, args, cfg)
    T = model.config.T
    report = bench({"tshint": lambda runs: model.predict(prepare(runs, T))}, parts.test,
                   {"checkpoint": model.fingerprint()})
    for p in report.write(run.out):
        run.output(p)
    run.metrics = report.to_dict()
    return run.finish()


def cmd_explain(args) -> dict:
    cfg = load_config(args.config, args.seed)
    if args.lam is not None:
        cfg["hint"]["lambda"] = args.lam
    run = Run("explain", args, cfg)
    model = _load_model(run, args.checkpoint)
    parts = _load_split(run, args, cfg)
    T = model.config.T
    pre, pool = prepare(parts.pretrain, T), prepare(parts.shot_pool, T)
    k = args.k if args.k is not None else cfg["hint"]["k"]
    ckpt = model.fingerprint()
    maps_dir = run.out / "maps"
    att_labels = {"xlabel": "key patch", "ylabel": "query patch"}
    sal_labels = {"xlabel": "timestep", "ylabel": "channel"}

    before = insight(model, pre, k)
    chosen = [s for s in pre if s.run_id in set(before.sample_ids)]
    for s in chosen:
        for p in export_map(sample_attention(model, s), maps_dir, "attention", ckpt, s.run_id, **att_labels):
            run.output(p)
        for p in export_map(saliency(model, s).values, maps_dir, "saliency", ckpt, s.run_id, **sal_labels):
            run.output(p)
    for p in export_map(before.attention, maps_dir, "attention_insight", ckpt, "aggregate", **att_labels):
        run.output(p)
    for p in export_map(before.saliency, maps_dir, "saliency_insight", ckpt, "aggregate", **sal_labels):
        run.output(p)

    # one heuristic-hinted shot, then the same k samples under the tuned model
    params = hint_params(cfg)
    hint = heuristic_hint(before, params)
    for p in export_map(hint.H, maps_dir, "hint", ckpt, "aggregate", **att_labels):
        run.output(p)
    tcfg = train_config(cfg)
    tuned = model.copy()
    shot = select_shots(tuned, pool, 1, tcfg.shot_selection, tcfg.seed)[0]
    rec = finetune_step(tuned, shot, hint, tcfg)
    tuned_ckpt = tuned.fingerprint()
    att_after = np.mean([sample_attention(tuned, s) for s in chosen], axis=0)
    sal_after = np.mean([saliency(tuned, s).values for s in chosen], axis=0)
    for name, mat, labels in (
        ("attention_insight_after", att_after, att_labels),
        ("saliency_insight_after", sal_after, sal_labels),
        ("attention_insight_diff", diff_maps(before.attention, att_after), att_labels),
        ("saliency_insight_diff", diff_maps(before.saliency, sal_after), sal_labels),
    ):
        for p in export_map(mat, maps_dir, name, tuned_ckpt, "aggregate", **labels):
            run.output(p)

    meta = {
        "checkpoint": ckpt,
        "finetuned_checkpoint": tuned_ckpt,
        "k": k,
        "samples": before.sample_ids,
        "attention_layer": before.layer,
        "attention_aggregation": "mean over heads and channels, pre-hint",
        "saliency_space": "normalized input",
        "top_features": before.top_features,
        "top_timesteps": before.top_timesteps[:20],
        "top_patches": before.top_patches,
        "shot": {"sample_id": rec.sample_id, "loss_before": rec.loss_before, "loss_after": rec.loss_after},
    }
    path = run.output(run.out / "insight.json")
    path.write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    run.metrics = {"k": k, "samples": before.sample_ids, "n_files": len(run.outputs)}
    return run.finish()


def cmd_bench(args) -> dict:
    cfg = load_config(args.config, args.seed)
    run = Run("bench", args, cfg)
    parts = _load_split(run, args, cfg)
    train_runs = parts.pretrain + parts.shot_pool
    predictors = {}
    hashes = {}
    for i, path in enumerate(args.checkpoint or []):
        model = _load_model(run, path, f"checkpoint{i}")
        name = Path(path).stem if Path(path).stem not in predictors else f"{Path(path).stem}_{i}"
        predictors[name] = (lambda m: lambda runs: m.predict(prepare(runs, m.config.T)))(model)
        hashes[name] = model.fingerprint()
    fit_on = parts.pretrain if args.baseline_fit == "pretrain" else train_runs
    predictors["preston"] = preston_fit(fit_on)
    predictors["mean"] = MeanPredictor(fit_on)
    report = bench(predictors, parts.test, hashes)
    for p in report.write(run.out):
        run.output(p)
    run.metrics = report.to_dict()
    run.metrics["preston_k"] = predictors["preston"].k
    return run.finish()


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tshint", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tshint {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="YAML config file (see README for the schema)")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if data:
            p.add_argument("--data", required=True, help="runs CSV")

    p = sub.add_parser("synth", help="generate a synthetic CMP dataset")
    common(p, data=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="supervised pretraining on the pretrain split")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("fewshot", help="N-shot hinted fine-tuning")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--provider", default="heuristic",
                   help="none | heuristic | llm | replay:<dir> (default: heuristic)")
    p.add_argument("--lambda", dest="lam", type=float, help="hint weight (overrides config)")
    p.add_argument("--hint-layers", help="comma-separated encoder layers or 'all'")
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("eval", help="test-split metrics for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="insight maps, saliency and 1-shot before/after diffs")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-k", type=int, help="number of best samples (default from config)")
    p.add_argument("--lambda", dest="lam", type=float)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("bench", help="compare checkpoints with Preston and mean baselines")
    common(p)
    p.add_argument("--checkpoint", action="append", help="may be repeated")
    p.add_argument("--baseline-fit", choices=("train", "pretrain"), default="train",
                   help="split used to fit the Preston and mean baselines")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - one machine-readable line for any failure
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
