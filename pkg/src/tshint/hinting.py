"""Attention hints from insight maps: a deterministic heuristic and an LLM provider.

The LLM path builds a prompt from the insight bundle, asks a chat endpoint
for a reasoning-then-JSON answer, and maps the suggested timestep ranges
onto key patches. Any failure along the way falls back to the heuristic, so
a few-shot run never stalls on the model server.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import httpx
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .attribution import InsightBundle
from .data import CHANNELS
from .model import AttentionHint, ModelConfig

log = logging.getLogger(__name__)

ENV_BASE_URL = "TSHINT_LLM_BASE_URL"
ENV_MODEL = "TSHINT_LLM_MODEL"
MIN_WEIGHT = 1e-3


class HintParseError(ValueError):
    pass


@dataclass
class HintParams:
    lam: float = 0.1
    n_features: int = 3
    n_ranges: int = 3
    smooth_kernel: int = 3

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.smooth_kernel < 1 or self.smooth_kernel % 2 == 0:
            raise ValueError(f"smooth_kernel must be odd and >= 1, got {self.smooth_kernel}")


@dataclass
class HintSuggestion:
    important_features: list[tuple[int, float]] = field(default_factory=list)
    important_timestep_ranges: list[tuple[int, int, float]] = field(default_factory=list)
    rationale: str = ""
    source: str = "llm"

    def to_json(self) -> str:
        return json.dumps(
            {
                "important_features": [[i, w] for i, w in self.important_features],
                "important_timestep_ranges": [[a, b, w] for a, b, w in self.important_timestep_ranges],
                "rationale": self.rationale,
            }
        )


@dataclass
class LLMEndpointConfig:
    base_url: str = "http://localhost:11434"
    model_name: str = "deepseek-r1:14b"
    temperature: float = 0.0
    timeout: float = 300.0
    max_retries: int = 2
    backoff: float = 1.0
    cache_dir: str | None = None
    chat_path: str = "/api/chat"

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_env(cls, **overrides) -> "LLMEndpointConfig":
        cfg = cls(**overrides)
        cfg.base_url = os.environ.get(ENV_BASE_URL, cfg.base_url)
        cfg.model_name = os.environ.get(ENV_MODEL, cfg.model_name)
        return cfg


# --------------------------------------------------------------------------
# matrix construction


def smooth_keys(H: np.ndarray, kernel: int) -> np.ndarray:
    """Box filter along the key axis with edge values repeated.

    A direct windowed mean rather than a running sum, so all-zero windows
    stay exactly zero.
    """
    H = np.asarray(H, dtype=np.float64)
    if kernel == 1:
        return H.copy()
    half = kernel // 2
    padded = np.pad(H, ((0, 0), (half, half)), mode="edge")
    return sliding_window_view(padded, kernel, axis=1).mean(axis=-1)


def _unit_max(H: np.ndarray) -> np.ndarray:
    peak = H.max() if H.size else 0.0
    return H / peak if peak > 0 else np.zeros_like(H)


def heuristic_hint(bundle: InsightBundle, params: HintParams) -> AttentionHint:
    """Distil the averaged attention map: max-normalise, smooth keys, renormalise."""
    H = _unit_max(np.clip(bundle.attention, 0.0, None))
    H = _unit_max(smooth_keys(H, params.smooth_kernel))
    return AttentionHint(H, params.lam, {"source": "heuristic"})


def patches_overlapping(start: int, end: int, cfg: ModelConfig) -> list[int]:
    """Key patches whose span ``[j*stride, j*stride + patch_len)`` meets ``[start, end)``."""
    return [
        j for j in range(cfg.n_patches)
        if j * cfg.stride < end and start < j * cfg.stride + cfg.patch_len
    ]


def suggestion_to_hint(s: HintSuggestion, cfg: ModelConfig, params: HintParams,
                       normalize: bool = True) -> AttentionHint:
    """Rasterise suggested ranges to key-patch columns, uniform over queries.

    Only the ``n_ranges`` heaviest ranges are used. Feature weights do not
    enter H (one H is shared by all channels); they ride along in ``meta``.
    """
    ranges = sorted(s.important_timestep_ranges, key=lambda r: -r[2])[: params.n_ranges]
    col = np.zeros(cfg.n_patches)
    for a, b, w in ranges:
        for j in patches_overlapping(a, b, cfg):
            col[j] = max(col[j], w)
    H = smooth_keys(np.tile(col, (cfg.n_patches, 1)), params.smooth_kernel)
    if normalize:
        H = _unit_max(H)
    meta = {
        "source": s.source,
        "features": [[i, w] for i, w in s.important_features[: params.n_features]],
        "ranges": [list(r) for r in ranges],
    }
    return AttentionHint(H, params.lam, meta)


# --------------------------------------------------------------------------
# prompt and response


def _q(text: str) -> str:
    """JSON-quote untrusted text so it cannot break the prompt structure."""
    return json.dumps(str(text), ensure_ascii=True)


def build_prompt(bundle: InsightBundle | None, sample_meta: dict, cfg: ModelConfig,
                 params: HintParams, channel_names: Sequence[str] = CHANNELS, top: int = 5) -> str:
    C, T = cfg.n_channels, cfg.T
    lines = [
        "You are helping fine-tune a patch-based time-series transformer that predicts the "
        "average material removal rate (MRR, nm/min) of a chemical mechanical polishing run "
        f"from {C} sensor channels.",
        f"Each channel is resampled to {T} timesteps and cut into {cfg.n_patches} patches of "
        f"{cfg.patch_len} timesteps with stride {cfg.stride}; patch j covers timesteps "
        f"[{cfg.stride}*j, {cfg.stride}*j+{cfg.patch_len}).",
        "",
    ]
    has_att = bundle is not None and len(bundle.top_patches) > 0
    has_sal = bundle is not None and len(bundle.top_features) > 0
    k = len(bundle.sample_ids) if bundle is not None else 0
    lines.append(f"Attention insight (mean over the {k} best-predicted training runs), "
                 "key patches ranked by attention mass received:")
    if has_att:
        mass = bundle.patch_mass
        for j in bundle.top_patches[:top]:
            a = j * cfg.stride
            lines.append(f"  patch {j} [{a}, {a + cfg.patch_len}): {mass[j]:.6f}")
    else:
        lines.append("  (no insight available)")
    lines.append("Saliency insight, features ranked by mean |d prediction / d input|:")
    if has_sal:
        fm = bundle.feature_mass
        for i in bundle.top_features[:top]:
            name = channel_names[i] if i < len(channel_names) else f"channel_{i}"
            lines.append(f"  feature {i} {_q(name)}: {fm[i]:.6g}")
    else:
        lines.append("  (no insight available)")
    lines.append("Timesteps ranked by mean saliency:")
    if has_sal and len(bundle.top_timesteps):
        tm = bundle.timestep_mass
        lines.append("  " + ", ".join(f"t={t}: {tm[t]:.6g}" for t in bundle.top_timesteps[:top * 2]))
    else:
        lines.append("  (no insight available)")
    lines += [
        "",
        "Sample being fine-tuned: run_id {rid}, mode {mode}, prediction {pred} nm/min, "
        "target {tgt} nm/min, absolute error {err} nm/min.".format(
            rid=_q(sample_meta.get("run_id", "")),
            mode=_q(sample_meta.get("mode", "unknown")),
            pred=_num(sample_meta.get("prediction")),
            tgt=_num(sample_meta.get("target")),
            err=_num(sample_meta.get("error")),
        ),
        "",
        "Think step by step about which timestep ranges the model should attend to and which "
        "features matter for this run. Your reasoning may precede the answer. End with exactly "
        "one JSON object and nothing after it:",
        '{"important_features": [[index, weight], ...], '
        '"important_timestep_ranges": [[start, end, weight], ...], "rationale": "..."}',
        f"Use at most {params.n_features} features and {params.n_ranges} ranges; feature indices "
        f"in [0, {C}), 0 <= start < end <= {T}, weights in (0, 1].",
    ]
    return "\n".join(lines) + "\n"


def _num(x) -> str:
    return "unknown" if x is None else f"{float(x):.4f}"


def _json_objects(text: str) -> list[dict]:
    """Top-level JSON objects embedded in free text, in order."""
    decoder = json.JSONDecoder()
    found, i = [], 0
    while True:
        i = text.find("{", i)
        if i < 0:
            return found
        try:
            obj, end = decoder.raw_decode(text, i)
        except json.JSONDecodeError:
            i += 1
            continue
        if isinstance(obj, dict):
            found.append(obj)
        i = end


def _weight(w) -> float:
    if isinstance(w, bool) or not isinstance(w, (int, float)):
        raise HintParseError(f"weight {w!r} is not a number")
    if not np.isfinite(w):
        raise HintParseError("non-finite weight")
    return float(min(1.0, max(MIN_WEIGHT, w)))


def _index(v, what: str) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or float(v) != int(v):
        raise HintParseError(f"{what} {v!r} is not an integer")
    return int(v)


def parse_response(text: str, n_channels: int = 19, T: int = 128, source: str = "llm") -> HintSuggestion:
    """Read the last JSON object in ``text`` as a hint suggestion.

    Features may be ``i``, ``[i, w]`` or ``{"index": i, "weight": w}``; ranges
    ``[a, b]``, ``[a, b, w]`` or ``{"start", "end", "weight"}``. Missing
    weights default to 1; weights are clamped into (0, 1].
    """
    objs = _json_objects(text or "")
    if not objs:
        raise HintParseError("no JSON object in response")
    obj = objs[-1]
    if "important_features" not in obj and "important_timestep_ranges" not in obj:
        raise HintParseError("JSON answer lacks important_features / important_timestep_ranges")
    feats, ranges = [], []
    for item in obj.get("important_features") or []:
        if isinstance(item, dict):
            i, w = item.get("index", item.get("feature")), item.get("weight", 1.0)
        elif isinstance(item, (list, tuple)) and len(item) in (1, 2):
            i, w = item[0], item[1] if len(item) == 2 else 1.0
        else:
            i, w = item, 1.0
        i = _index(i, "feature index")
        if not 0 <= i < n_channels:
            raise HintParseError(f"feature index {i} outside [0, {n_channels})")
        feats.append((i, _weight(w)))
    for item in obj.get("important_timestep_ranges") or []:
        if isinstance(item, dict):
            a, b, w = item.get("start"), item.get("end"), item.get("weight", 1.0)
        elif isinstance(item, (list, tuple)) and len(item) in (2, 3):
            a, b, w = item[0], item[1], item[2] if len(item) == 3 else 1.0
        else:
            raise HintParseError(f"malformed timestep range {item!r}")
        a, b = _index(a, "range start"), _index(b, "range end")
        if not 0 <= a < b <= T:
            raise HintParseError(f"timestep range [{a}, {b}) outside [0, {T})")
        ranges.append((a, b, _weight(w)))
    rationale = obj.get("rationale", "")
    return HintSuggestion(feats, ranges, rationale if isinstance(rationale, str) else json.dumps(rationale), source)


# --------------------------------------------------------------------------
# LLM client + transcript cache


class LLMError(RuntimeError):
    pass


def chat_completion(endpoint: LLMEndpointConfig, prompt: str, client: httpx.Client | None = None) -> str:
    """POST one chat request, retrying on transport errors and bad statuses."""
    url = endpoint.base_url.rstrip("/") + endpoint.chat_path
    payload = {
        "model": endpoint.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": endpoint.temperature,
        "options": {"temperature": endpoint.temperature},
        "stream": False,
    }
    own = client is None
    client = client or httpx.Client(timeout=endpoint.timeout)
    last: Exception | None = None
    try:
        for attempt in range(endpoint.max_retries + 1):
            if attempt:
                time.sleep(endpoint.backoff * 2 ** (attempt - 1))
            try:
                resp = client.post(url, json=payload, timeout=endpoint.timeout)
                resp.raise_for_status()
                body = resp.json()
                if isinstance(body.get("message"), dict):
                    return str(body["message"]["content"])
                if body.get("choices"):
                    return str(body["choices"][0]["message"]["content"])
                raise LLMError("response has no assistant message")
            except (httpx.HTTPError, ValueError, KeyError, TypeError, LLMError) as exc:
                last = exc
                log.warning("LLM request attempt %d failed: %s", attempt + 1, exc)
    finally:
        if own:
            client.close()
    raise LLMError(f"LLM request failed after {endpoint.max_retries + 1} attempt(s): {last}")


def transcript_key(endpoint: LLMEndpointConfig, prompt: str) -> str:
    blob = json.dumps(
        {"model": endpoint.model_name, "temperature": endpoint.temperature, "prompt": prompt},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def llm_hint(bundle: InsightBundle, sample_meta: dict, endpoint: LLMEndpointConfig,
             cfg: ModelConfig, params: HintParams, offline: bool = False,
             client: httpx.Client | None = None) -> tuple[AttentionHint, dict]:
    """Hint from a cached or live LLM answer, or the heuristic on any failure.

    With ``offline`` only the transcript cache is consulted. Returns the hint
    (``meta["provenance"]`` is ``llm``, ``replay`` or ``heuristic-fallback``)
    and the transcript record.
    """
    prompt = build_prompt(bundle, sample_meta, cfg, params)
    key = transcript_key(endpoint, prompt)
    cache = Path(endpoint.cache_dir) / f"{key}.json" if endpoint.cache_dir else None
    transcript = {"key": key, "model": endpoint.model_name, "prompt": prompt,
                  "response": None, "outcome": None, "error": None}
    provenance = "llm"
    if cache is not None and cache.exists():
        transcript["response"] = json.loads(cache.read_text(encoding="utf-8"))["response"]
        provenance = "replay"
    elif offline:
        transcript["error"] = "no cached transcript"
    else:
        try:
            transcript["response"] = chat_completion(endpoint, prompt, client)
        except LLMError as exc:
            transcript["error"] = str(exc)

    hint = None
    if transcript["response"] is not None:
        try:
            s = parse_response(transcript["response"], cfg.n_channels, cfg.T, source=provenance)
            hint = suggestion_to_hint(s, cfg, params)
            transcript["outcome"] = "ok"
            transcript["suggestion"] = json.loads(s.to_json())
        except HintParseError as exc:
            transcript["error"] = f"parse: {exc}"
        if cache is not None and provenance == "llm":
            record = {k: transcript[k] for k in ("key", "model", "prompt", "response")}
            _write_atomic(cache, json.dumps(record, indent=1, sort_keys=True) + "\n")
    if hint is None:
        provenance = "heuristic-fallback"
        transcript["outcome"] = "fallback"
        hint = heuristic_hint(bundle, params)
    hint.meta["provenance"] = provenance
    return hint, transcript


# --------------------------------------------------------------------------
# providers


@dataclass
class HintResult:
    hint: AttentionHint | None
    provenance: str
    transcript: dict | None = None


def sample_meta(sample, model) -> dict:
    pred = float(model.predict([sample])[0])
    return {
        "run_id": sample.run_id,
        "mode": getattr(sample.mode, "value", str(sample.mode)),
        "prediction": pred,
        "target": float(sample.target),
        "error": abs(pred - float(sample.target)),
    }


class HeuristicProvider:
    def __init__(self, bundle: InsightBundle, params: HintParams | None = None):
        self.bundle = bundle
        self.params = params or HintParams()

    def __call__(self, sample, model) -> HintResult:
        hint = heuristic_hint(self.bundle, self.params)
        hint.meta["provenance"] = "heuristic"
        return HintResult(hint, "heuristic")


class LLMProvider:
    """Live (``offline=False``) or replay-only (``offline=True``) LLM hints."""

    def __init__(self, bundle: InsightBundle, endpoint: LLMEndpointConfig,
                 params: HintParams | None = None, offline: bool = False,
                 client: httpx.Client | None = None):
        self.bundle = bundle
        self.endpoint = endpoint
        self.params = params or HintParams()
        self.offline = offline
        self.client = client
        self.transcripts: list[dict] = []

    def __call__(self, sample, model) -> HintResult:
        hint, transcript = llm_hint(self.bundle, sample_meta(sample, model), self.endpoint,
                                    model.config, self.params, self.offline, self.client)
        self.transcripts.append(transcript)
        return HintResult(hint, hint.meta["provenance"], transcript)


def make_provider(spec: str, bundle: InsightBundle | None, params: HintParams,
                  endpoint: LLMEndpointConfig | None = None):
    """``none`` | ``heuristic`` | ``llm`` | ``replay:<dir>``."""
    if spec == "none":
        return None
    if bundle is None:
        raise ValueError(f"provider {spec!r} needs an insight bundle")
    if spec == "heuristic":
        return HeuristicProvider(bundle, params)
    if spec == "llm":
        return LLMProvider(bundle, endpoint or LLMEndpointConfig.from_env(), params)
    if spec.startswith("replay:"):
        ep = endpoint or LLMEndpointConfig.from_env()
        ep.cache_dir = spec.split(":", 1)[1]
        return LLMProvider(bundle, ep, params, offline=True)
    raise ValueError(f"unknown provider {spec!r}")
