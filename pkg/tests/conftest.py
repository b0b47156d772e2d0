from __future__ import annotations

import numpy as np
import pytest

from tshint.data import SynthConfig, prepare, synthesize
from tshint.model import ModelConfig, PatchTSTRegressor


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_channels=3, T=32, patch_len=8, stride=4, d_model=8, n_heads=2,
                n_layers=1, ffn_dim=16, head_dims=(8, 4), seed=0)
    base.update(kw)
    return ModelConfig(**base)


def small_config(**kw) -> ModelConfig:
    """19 channels so real samples fit, everything else shrunk."""
    base = dict(n_channels=19, T=32, patch_len=8, stride=4, d_model=8, n_heads=2,
                n_layers=2, ffn_dim=16, head_dims=(16, 8), seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_runs():
    return synthesize(SynthConfig(n_low=24, n_high=8, length_range=(32, 64), noise_std=0.5,
                                  wear_effect=10.0, seed=7))


@pytest.fixture(scope="session")
def small_samples(small_runs):
    return prepare(small_runs, T=32)


@pytest.fixture
def small_model(small_samples):
    model = PatchTSTRegressor(small_config())
    model.fit_normalization(small_samples)
    return model


TINY_YAML = """\
seed: 3
synth: {n_low: 30, n_high: 10, length_range: [32, 48], noise_std: 0.5, wear_effect: 20.0}
split: {train_frac: 0.8, pretrain_frac: 0.5}
model: {T: 32, patch_len: 8, stride: 4, d_model: 8, n_heads: 2, n_layers: 2, ffn_dim: 16,
        head_dims: [16, 8]}
train: {max_epochs: 3, batch_size: 8}
hint: {k: 5}
llm: {timeout: 0.3, max_retries: 1, backoff: 0.0}
"""


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory):
    """A synthesized dataset and a pretrained tiny checkpoint made through the CLI."""
    from tshint.cli import main

    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY_YAML, encoding="utf-8")
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["pretrain", "--config", str(cfg), "--data", str(root / "data" / "runs.csv"),
                 "--out", str(root / "pre")]) == 0
    return root


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
