"""Patch-transformer MRR regression with attention hints and saliency insight."""

__version__ = "0.1.0"

from .attribution import InsightBundle, SaliencyMap, diff_maps, insight, saliency, top_k_best
from .data import CHANNELS, Mode, SampleTensor, SynthConfig, WaferRun, load_runs, prepare, split, synthesize
from .evaluation import PrestonModel, bench, preston_fit, r2, rmse
from .hinting import HintParams, HintSuggestion, LLMEndpointConfig, heuristic_hint, parse_response
from .model import AttentionHint, ModelConfig, PatchTSTRegressor, forward
from .training import TrainConfig, finetune_step, pretrain, run_few_shot

__all__ = [
    "AttentionHint",
    "CHANNELS",
    "HintParams",
    "HintSuggestion",
    "InsightBundle",
    "LLMEndpointConfig",
    "Mode",
    "ModelConfig",
    "PatchTSTRegressor",
    "PrestonModel",
    "SaliencyMap",
    "SampleTensor",
    "SynthConfig",
    "TrainConfig",
    "WaferRun",
    "bench",
    "diff_maps",
    "finetune_step",
    "forward",
    "heuristic_hint",
    "insight",
    "load_runs",
    "parse_response",
    "prepare",
    "pretrain",
    "preston_fit",
    "r2",
    "rmse",
    "run_few_shot",
    "saliency",
    "split",
    "synthesize",
    "top_k_best",
]
