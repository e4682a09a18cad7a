"""Predicted Expert Utility: filtered, transformed router-logit aggregation.

The token-level score of expert ``i`` with logit ``s_i`` is

    s~_i = f(s_i)   if i is in the top-K_a logit pool and its local softmax
                    probability within the pool is >= r (inclusive),
    s~_i = 0        otherwise,

and an expert's utility for a calibration trace is the mean of its token-level
scores over all tokens. Collected for every layer and expert, these means form
the trace's computational pattern: an (L, N_r) matrix plus the per-layer
thresholds that produced it.

Threshold modes:

* ``adaptive`` - per layer, r_l is the mean over tokens of the largest local
  softmax probability inside that token's pool (two passes over the trace:
  thresholds first, then scores).
* ``fixed``    - one user-supplied r in [0, 1] for every layer.
* ``none``     - pool membership alone decides (equivalent to r = 0, since
  local probabilities are strictly positive).

Transforms (applied to surviving raw logits):

* ``raw``        f(s) = s
* ``sigmoid``    f(s) = 1 / (1 + e^-s)
* ``rectifier``  f(s) = max(s, sigmoid(s))   (default)
* ``exp``        f(s) = e^s, saturating at the largest float64 on overflow

``raw`` keeps the sign of negative logits, so an expert that never enters a
pool (score 0) can outrank one with consistently negative logits; the three
positive transforms are what make "never selected" strictly worst.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .trace import RouterTrace, TraceValueError

TRANSFORM_KINDS = ("raw", "sigmoid", "rectifier", "exp")
THRESHOLD_MODES = ("adaptive", "fixed", "none")

_F64_MAX = np.finfo(np.float64).max


@dataclass(frozen=True)
class PeuConfig:
    """Hyperparameters of the scoring pipeline.

    k_a: candidate pool size (1 <= k_a <= number of routed experts).
    transform: one of ``raw``, ``sigmoid``, ``rectifier``, ``exp``.
    threshold: one of ``adaptive``, ``fixed``, ``none``.
    fixed_r: confidence cutoff in [0, 1]; required iff threshold == "fixed".
    """

    k_a: int
    transform: str = "rectifier"
    threshold: str = "adaptive"
    fixed_r: float | None = None

    def __post_init__(self):
        if self.k_a < 1:
            raise ValueError(f"k_a must be >= 1, got {self.k_a}")
        if self.transform not in TRANSFORM_KINDS:
            raise ValueError(
                f"unknown transform {self.transform!r}; expected one of {TRANSFORM_KINDS}"
            )
        if self.threshold not in THRESHOLD_MODES:
            raise ValueError(
                f"unknown threshold mode {self.threshold!r}; expected one of {THRESHOLD_MODES}"
            )
        if self.threshold == "fixed":
            if self.fixed_r is None:
                raise ValueError("threshold 'fixed' requires fixed_r")
            if not (0.0 <= self.fixed_r <= 1.0):
                raise ValueError(f"fixed_r must be in [0, 1], got {self.fixed_r}")
        elif self.fixed_r is not None:
            raise ValueError("fixed_r is only valid with threshold 'fixed'")

    def check_pool(self, num_experts: int) -> None:
        if self.k_a > num_experts:
            raise ValueError(
                f"k_a={self.k_a} exceeds the number of routed experts ({num_experts})"
            )


@dataclass
class ComputationalPattern:
    """Per-layer utility scores for one calibration trace.

    ``scores`` has shape (num_layers, num_experts); ``thresholds`` holds the
    per-layer r actually used while scoring (0.0 in mode ``none``).
    """

    model_id: str
    domain_tag: str
    num_layers: int
    num_experts: int
    token_count: int
    config: PeuConfig
    thresholds: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (self.num_layers, self.num_experts):
            raise ValueError(
                f"scores shape {self.scores.shape} != "
                f"({self.num_layers}, {self.num_experts})"
            )
        if self.thresholds.shape != (self.num_layers,):
            raise ValueError(
                f"thresholds shape {self.thresholds.shape} != ({self.num_layers},)"
            )
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("pattern scores must be finite")

    def to_json_dict(self) -> dict:
        cfg: dict = {
            "k_a": self.config.k_a,
            "transform": self.config.transform,
            "threshold_mode": self.config.threshold,
        }
        if self.config.fixed_r is not None:
            cfg["fixed_r"] = self.config.fixed_r
        return {
            "model_id": self.model_id,
            "domain_tag": self.domain_tag,
            "num_layers": self.num_layers,
            "num_routed_experts": self.num_experts,
            "token_count": self.token_count,
            "config": cfg,
            "thresholds": self.thresholds.tolist(),
            "scores": self.scores.tolist(),
        }

    @classmethod
    def from_json_dict(cls, obj: Mapping) -> "ComputationalPattern":
        cfg = obj["config"]
        config = PeuConfig(
            k_a=int(cfg["k_a"]),
            transform=str(cfg["transform"]),
            threshold=str(cfg["threshold_mode"]),
            fixed_r=float(cfg["fixed_r"]) if "fixed_r" in cfg else None,
        )
        return cls(
            model_id=str(obj["model_id"]),
            domain_tag=str(obj["domain_tag"]),
            num_layers=int(obj["num_layers"]),
            num_experts=int(obj["num_routed_experts"]),
            token_count=int(obj["token_count"]),
            config=config,
            thresholds=np.asarray(obj["thresholds"], dtype=np.float64),
            scores=np.asarray(obj["scores"], dtype=np.float64),
        )


def write_pattern(pattern: ComputationalPattern, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(pattern.to_json_dict(), fh, separators=(",", ":"))
        fh.write("\n")


def read_pattern(path: str | Path) -> ComputationalPattern:
    with open(path, "r", encoding="utf-8") as fh:
        return ComputationalPattern.from_json_dict(json.load(fh))


def topk_pool(logits: np.ndarray, k_a: int) -> np.ndarray:
    """Indices of the ``k_a`` largest logits, descending; ties go to the lower index."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[-1]
    if k_a > n:
        raise ValueError(f"k_a={k_a} exceeds vector length {n}")
    if k_a < 1:
        raise ValueError(f"k_a must be >= 1, got {k_a}")
    # lexsort is stable: secondary key -logits, ties resolved by ascending index.
    order = np.lexsort((np.arange(n), -logits))
    return order[:k_a]


def local_softmax(logits: np.ndarray, pool: np.ndarray) -> dict[int, float]:
    """Softmax over the pool members only, keyed by expert index.

    Max-subtracted for numerical stability; probabilities sum to 1 over the pool.
    """
    pool = np.asarray(pool, dtype=np.intp)
    if pool.size == 0:
        raise ValueError("pool must be non-empty")
    probs = _pool_probs(np.asarray(logits, dtype=np.float64), pool)
    return {int(i): float(p) for i, p in zip(pool, probs)}


def _pool_probs(logits: np.ndarray, pool: np.ndarray) -> np.ndarray:
    pooled = logits[pool]
    ex = np.exp(pooled - pooled.max())
    return ex / ex.sum()


def transform(s: float, kind: str) -> float:
    """Apply one logit transform to a scalar."""
    if kind == "raw":
        return float(s)
    if kind == "sigmoid":
        return _sigmoid(s)
    if kind == "rectifier":
        return max(float(s), _sigmoid(s))
    if kind == "exp":
        try:
            return math.exp(s)
        except OverflowError:
            return float(_F64_MAX)
    raise ValueError(f"unknown transform {kind!r}")


def _sigmoid(s: float) -> float:
    if s >= 0:
        return 1.0 / (1.0 + math.exp(-s))
    e = math.exp(s)
    return e / (1.0 + e)


def transform_array(values: np.ndarray, kind: str) -> np.ndarray:
    """Vectorized ``transform``; overflow of ``exp`` saturates instead of erroring."""
    v = np.asarray(values, dtype=np.float64)
    if kind == "raw":
        return v.copy()
    if kind == "sigmoid":
        return _sigmoid_array(v)
    if kind == "rectifier":
        return np.maximum(v, _sigmoid_array(v))
    if kind == "exp":
        with np.errstate(over="ignore"):
            out = np.exp(v)
        return np.nan_to_num(out, posinf=_F64_MAX)
    raise ValueError(f"unknown transform {kind!r}")


def _sigmoid_array(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def adaptive_thresholds(trace: RouterTrace, k_a: int) -> np.ndarray:
    """Per-layer mean over tokens of the top pool probability.

    Each entry lies in [1/k_a, 1]: the pool's largest probability can never be
    below the uniform value or above 1.
    """
    if trace.token_count == 0:
        raise TraceValueError("adaptive thresholds are undefined on an empty trace")
    if k_a > trace.num_experts:
        raise ValueError(
            f"k_a={k_a} exceeds the number of routed experts ({trace.num_experts})"
        )
    totals = np.zeros(trace.num_layers, dtype=np.float64)
    for tok in trace.tokens:
        layers = tok.layers.astype(np.float64)
        for layer in range(trace.num_layers):
            pool = topk_pool(layers[layer], k_a)
            totals[layer] += _pool_probs(layers[layer], pool).max()
    return totals / trace.token_count


def token_scores(logits: np.ndarray, config: PeuConfig, r_l: float) -> np.ndarray:
    """Token-level utility scores for one layer's logit vector.

    Entry i is transform(logit_i) when i is pooled and (unless mode ``none``)
    its local probability is >= r_l; zero otherwise.
    """
    logits = np.asarray(logits, dtype=np.float64)
    config.check_pool(logits.shape[-1])
    pool = topk_pool(logits, config.k_a)
    out = np.zeros_like(logits)
    if config.threshold == "none":
        survivors = pool
    else:
        probs = _pool_probs(logits, pool)
        survivors = pool[probs >= r_l]
    if survivors.size:
        out[survivors] = transform_array(logits[survivors], config.transform)
    return out


def _thresholds_for(trace: RouterTrace, config: PeuConfig) -> np.ndarray:
    if config.threshold == "adaptive":
        return adaptive_thresholds(trace, config.k_a)
    if config.threshold == "fixed":
        return np.full(trace.num_layers, float(config.fixed_r), dtype=np.float64)
    return np.zeros(trace.num_layers, dtype=np.float64)


def accumulate_peu(trace: RouterTrace, config: PeuConfig) -> ComputationalPattern:
    """Average token-level scores over a whole trace into a pattern.

    Adaptive thresholds are computed on the full trace first, then scoring runs
    a second pass; summation is in ascending token order so results are
    bit-stable across runs.
    """
    if trace.token_count == 0:
        raise TraceValueError("cannot accumulate utilities over an empty trace")
    config.check_pool(trace.num_experts)
    thresholds = _thresholds_for(trace, config)
    acc = np.zeros((trace.num_layers, trace.num_experts), dtype=np.float64)
    for tok in trace.tokens:
        layers = tok.layers.astype(np.float64)
        for layer in range(trace.num_layers):
            acc[layer] += token_scores(layers[layer], config, thresholds[layer])
    scores = acc / trace.token_count
    return ComputationalPattern(
        model_id=trace.header.model_id,
        domain_tag=trace.header.domain_tag,
        num_layers=trace.num_layers,
        num_experts=trace.num_experts,
        token_count=trace.token_count,
        config=config,
        thresholds=thresholds,
        scores=scores,
    )
