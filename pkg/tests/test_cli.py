import json
import os
import subprocess
import sys

import numpy as np
import pytest

from fake_llm import FakeLLM, cot_answer
from tshint.attribution import read_matrix_csv
from tshint.cli import load_config, main, sha256_file
from tshint.training import read_shots_csv

HEX12 = "[0-9a-f]" * 12


def _args(ws, cmd, out, *extra, checkpoint=True):
    args = [cmd, "--config", str(ws / "tiny.yaml"), "--data", str(ws / "data" / "runs.csv"), "--out", str(out)]
    if checkpoint:
        args += ["--checkpoint", str(ws / "pre" / "model.ckpt")]
    return args + list(extra)


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_manifest_lists_every_output(cli_workspace):
    for sub in ("data", "pre"):
        out = cli_workspace / sub
        man = _manifest(out)
        files = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()} - {"manifest.json"}
        assert set(man["outputs"]) == files
        for rel, digest in man["outputs"].items():
            assert sha256_file(out / rel) == digest
        assert man["seeds"] == {"global": 3} and man["wall_time_s"] >= 0
    pre = _manifest(cli_workspace / "pre")
    assert pre["inputs"]["data"]["sha256"] == sha256_file(cli_workspace / "data" / "runs.csv")
    assert set(json.loads((cli_workspace / "pre" / "split.json").read_text())) == {"pretrain", "shot_pool", "test"}


def test_synth_is_reproducible(cli_workspace, tmp_path):
    assert main(["synth", "--config", str(cli_workspace / "tiny.yaml"), "--out", str(tmp_path)]) == 0
    assert _manifest(tmp_path)["outputs"] == _manifest(cli_workspace / "data")["outputs"]
    assert main(["synth", "--config", str(cli_workspace / "tiny.yaml"), "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    assert _manifest(tmp_path / "b")["outputs"] != _manifest(tmp_path)["outputs"]


def test_fewshot_zero_shots(cli_workspace, tmp_path):
    assert main(_args(cli_workspace, "fewshot", tmp_path, "--shots", "0")) == 0
    rows = read_shots_csv(tmp_path / "shots.csv")
    assert len(rows) == 1 and rows[0]["shot_index"] == 0


def test_fewshot_flags(cli_workspace, tmp_path):
    assert main(_args(cli_workspace, "fewshot", tmp_path, "--shots", "2", "--lambda", "0.3",
                      "--hint-layers", "1", "--provider", "heuristic")) == 0
    rows = read_shots_csv(tmp_path / "shots.csv")
    assert [r["provenance"] for r in rows] == ["none", "heuristic", "heuristic"]
    assert rows[1]["hint_lambda"] == 0.3
    man = _manifest(tmp_path)
    assert man["config"]["hint"]["lambda"] == 0.3
    assert man["config"]["model"]["hint_layers"] == [1]
    assert "finetuned.ckpt" in man["outputs"]
    # the pretrained checkpoint is untouched
    assert sha256_file(cli_workspace / "pre" / "model.ckpt") == _manifest(cli_workspace / "pre")["outputs"]["model.ckpt"]


def test_fewshot_provider_none(cli_workspace, tmp_path):
    assert main(_args(cli_workspace, "fewshot", tmp_path, "--shots", "1", "--provider", "none")) == 0
    assert read_shots_csv(tmp_path / "shots.csv")[1]["provenance"] == "none"


def test_heuristic_cli_never_calls_endpoint(cli_workspace, tmp_path, monkeypatch):
    with FakeLLM([("ok", cot_answer({"important_features": [], "important_timestep_ranges": []}))]) as fake:
        monkeypatch.setenv("TSHINT_LLM_BASE_URL", fake.url)
        assert main(_args(cli_workspace, "fewshot", tmp_path, "--shots", "2")) == 0
        assert fake.requests == []


def test_llm_provider_writes_transcripts(cli_workspace, tmp_path, monkeypatch):
    answer = {"important_features": [[6, 1.0]], "important_timestep_ranges": [[0, 8, 1.0]], "rationale": "x"}
    with FakeLLM([("ok", cot_answer(answer))]) as fake:
        monkeypatch.setenv("TSHINT_LLM_BASE_URL", fake.url)
        assert main(_args(cli_workspace, "fewshot", tmp_path, "--shots", "2", "--provider", "llm")) == 0
        assert len(fake.requests) == 2
    rows = read_shots_csv(tmp_path / "shots.csv")
    assert [r["provenance"] for r in rows[1:]] == ["llm", "llm"]
    man = _manifest(tmp_path)
    assert sum(k.startswith("transcripts/") for k in man["outputs"]) == 2
    assert "transcript_log.json" in man["outputs"]


def test_eval_and_bench(cli_workspace, tmp_path):
    assert main(_args(cli_workspace, "eval", tmp_path / "ev")) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert {r["model"] for r in report["rows"]} == {"tshint"}
    assert main(_args(cli_workspace, "bench", tmp_path / "be")) == 0
    rows = json.loads((tmp_path / "be" / "report.json").read_text())["rows"]
    assert {r["model"] for r in rows} == {"model", "preston", "mean"}
    assert {r["mode"] for r in rows} == {"all", "LowSpeed", "HighSpeed"}
    assert _manifest(tmp_path / "be")["metrics"]["preston_k"] > 0


def test_explain_outputs(cli_workspace, tmp_path):
    assert main(_args(cli_workspace, "explain", tmp_path, "-k", "5")) == 0
    meta = json.loads((tmp_path / "insight.json").read_text())
    assert len(meta["samples"]) == 5 and meta["attention_layer"] == 1
    maps = tmp_path / "maps"
    for kind in ("attention", "saliency"):
        assert len([p for p in maps.glob(f"{kind}_*_run*.csv")]) == 5
        assert len([p for p in maps.glob(f"{kind}_*_run*.png")]) == 5
    for kind in ("attention_insight", "saliency_insight", "hint", "attention_insight_after",
                 "attention_insight_diff", "saliency_insight_diff"):
        for ext in ("csv", "png"):
            assert len(list(maps.glob(f"{kind}_{HEX12}_aggregate.{ext}"))) == 1, kind
    (att,) = maps.glob(f"attention_insight_{HEX12}_aggregate.csv")
    np.testing.assert_allclose(read_matrix_csv(att).sum(axis=1), 1.0, atol=1e-9)
    assert len(_manifest(tmp_path)["outputs"]) == len(list(tmp_path.rglob("*.*"))) - 1


def test_error_is_one_json_line(cli_workspace, tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "tshint.cli", "eval", "--data", str(tmp_path / "missing.csv"),
         "--checkpoint", str(cli_workspace / "pre" / "model.ckpt"), "--out", str(tmp_path)],
        capture_output=True, text=True, env={**os.environ, "PYTHONWARNINGS": "ignore"},
    )
    assert proc.returncode != 0
    lines = proc.stderr.strip().splitlines()
    assert len(lines) == 1
    err = json.loads(lines[0])
    assert err["error"] == "FileNotFoundError"


def test_bad_provider_and_config(cli_workspace, tmp_path, capsys):
    assert main(_args(cli_workspace, "fewshot", tmp_path, "--provider", "oracle")) == 1
    assert "unknown provider" in json.loads(capsys.readouterr().err)["message"]
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {depth: 3}\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "unknown keys" in json.loads(capsys.readouterr().err)["message"]


def test_load_config_layers(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 9\ntrain: {max_epochs: 7}\n")
    cfg = load_config(str(p), seed=2)
    assert cfg["seed"] == 2 and cfg["train"]["max_epochs"] == 7
    assert cfg["train"]["lr_pretrain"] == 1e-3
    with pytest.raises(Exception):
        p.write_text("bogus: 1\n")
        load_config(str(p))


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["pretrain", "--out", "x"])
    assert exc.value.code == 2
