"""Comparison scoring methods, each yielding an (L, N_r) score matrix.

All rankers share the shape and file format of the utility pipeline's
computational pattern, so downstream selection is ranker-agnostic. Besides the
plain functions, each method is wrapped in a scikit-learn style estimator:
construct with hyperparameters, call ``fit(trace)``, then read ``scores_``,
``thresholds_`` and ``pattern_``. Estimators support ``get_params`` /
``set_params`` and compose with sklearn tooling (``clone`` etc.).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .peu import (
    ComputationalPattern,
    PeuConfig,
    accumulate_peu,
    topk_pool,
)
from .rng import uniforms
from .trace import RouterTrace, TraceValueError

RANKER_KINDS = ("peu", "frequency", "all-logits", "act-logits", "random", "last-peu")


def frequency_scores(trace: RouterTrace, k_act: int) -> np.ndarray:
    """Fraction of tokens in which each expert sits in the layer's top-k_act pool."""
    _check_nonempty(trace)
    if k_act > trace.num_experts or k_act < 1:
        raise ValueError(f"k_act={k_act} out of range for {trace.num_experts} experts")
    counts = np.zeros((trace.num_layers, trace.num_experts), dtype=np.float64)
    for tok in trace.tokens:
        layers = tok.layers.astype(np.float64)
        for layer in range(trace.num_layers):
            counts[layer, topk_pool(layers[layer], k_act)] += 1.0
    return counts / trace.token_count


def all_logits_scores(trace: RouterTrace) -> np.ndarray:
    """Mean raw logit per (layer, expert): no pool, no threshold, no transform."""
    _check_nonempty(trace)
    acc = np.zeros((trace.num_layers, trace.num_experts), dtype=np.float64)
    for tok in trace.tokens:
        acc += tok.layers.astype(np.float64)
    return acc / trace.token_count


def act_logits_scores(trace: RouterTrace, k_act: int) -> np.ndarray:
    """Mean raw logit over pooled tokens only, zeros outside the pool.

    Equals the utility pipeline with transform ``raw`` and threshold ``none``;
    kept as an independent implementation so that equivalence is testable.
    """
    _check_nonempty(trace)
    if k_act > trace.num_experts or k_act < 1:
        raise ValueError(f"k_act={k_act} out of range for {trace.num_experts} experts")
    acc = np.zeros((trace.num_layers, trace.num_experts), dtype=np.float64)
    for tok in trace.tokens:
        layers = tok.layers.astype(np.float64)
        for layer in range(trace.num_layers):
            pool = topk_pool(layers[layer], k_act)
            acc[layer, pool] += layers[layer, pool]
    return acc / trace.token_count


def random_scores(num_layers: int, num_experts: int, seed: int) -> np.ndarray:
    """Seeded pseudo-random scores in [0, 1), row-major from the SplitMix64 stream."""
    flat = uniforms(seed, num_layers * num_experts)
    return flat.reshape(num_layers, num_experts)


def _check_nonempty(trace: RouterTrace) -> None:
    if trace.token_count == 0:
        raise TraceValueError("scores are undefined on an empty trace")


class BaseExpertScorer(BaseEstimator):
    """Common fit/attributes contract for all expert scorers.

    After ``fit(trace)``:
      scores_      (num_layers, num_experts) float64 matrix
      thresholds_  per-layer thresholds used (zeros where not applicable)
      pattern_     the full ComputationalPattern carrying trace metadata
    """

    def fit(self, trace: RouterTrace, y=None):
        raise NotImplementedError

    def _finish(self, trace: RouterTrace, scores: np.ndarray,
                thresholds: np.ndarray, config: PeuConfig) -> "BaseExpertScorer":
        self.pattern_ = ComputationalPattern(
            model_id=trace.header.model_id,
            domain_tag=trace.header.domain_tag,
            num_layers=trace.num_layers,
            num_experts=trace.num_experts,
            token_count=trace.token_count,
            config=config,
            thresholds=thresholds,
            scores=scores,
        )
        self.scores_ = self.pattern_.scores
        self.thresholds_ = self.pattern_.thresholds
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "pattern_"):
            raise NotFittedError(
                f"{type(self).__name__} is not fitted yet; call fit(trace) first"
            )


class PeuScorer(BaseExpertScorer):
    """Filtered-and-transformed utility scorer (the pipeline's default ranker)."""

    def __init__(self, k_a: int = 8, transform: str = "rectifier",
                 threshold: str = "adaptive", fixed_r: float | None = None):
        self.k_a = k_a
        self.transform = transform
        self.threshold = threshold
        self.fixed_r = fixed_r

    def config(self) -> PeuConfig:
        return PeuConfig(self.k_a, self.transform, self.threshold, self.fixed_r)

    def fit(self, trace: RouterTrace, y=None):
        pattern = accumulate_peu(trace, self.config())
        return self._finish(trace, pattern.scores, pattern.thresholds, pattern.config)


class LastPeuScorer(PeuScorer):
    """Utility scores negated, so top-M selection keeps the bottom-ranked experts."""

    def fit(self, trace: RouterTrace, y=None):
        pattern = accumulate_peu(trace, self.config())
        return self._finish(trace, -pattern.scores, pattern.thresholds, pattern.config)


class FrequencyScorer(BaseExpertScorer):
    """Ranks experts by how often they appear in the top-k_act pool."""

    def __init__(self, k_act: int = 8):
        self.k_act = k_act

    def fit(self, trace: RouterTrace, y=None):
        scores = frequency_scores(trace, self.k_act)
        config = PeuConfig(self.k_act, "raw", "none")
        return self._finish(trace, scores, np.zeros(trace.num_layers), config)


class AllLogitsScorer(BaseExpertScorer):
    """Ranks experts by mean raw logit over every token."""

    def fit(self, trace: RouterTrace, y=None):
        scores = all_logits_scores(trace)
        config = PeuConfig(trace.num_experts, "raw", "none")
        return self._finish(trace, scores, np.zeros(trace.num_layers), config)


class ActLogitsScorer(BaseExpertScorer):
    """Ranks experts by mean raw logit over pooled tokens (TopK filter only)."""

    def __init__(self, k_act: int = 8):
        self.k_act = k_act

    def fit(self, trace: RouterTrace, y=None):
        scores = act_logits_scores(trace, self.k_act)
        config = PeuConfig(self.k_act, "raw", "none")
        return self._finish(trace, scores, np.zeros(trace.num_layers), config)


class RandomScorer(BaseExpertScorer):
    """Seeded random scores; the trace contributes only its shape."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def fit(self, trace: RouterTrace, y=None):
        scores = random_scores(trace.num_layers, trace.num_experts, self.seed)
        config = PeuConfig(trace.num_experts, "raw", "none")
        return self._finish(trace, scores, np.zeros(trace.num_layers), config)


def make_scorer(kind: str, *, k_a: int = 8, transform: str = "rectifier",
                threshold: str = "adaptive", fixed_r: float | None = None,
                k_act: int | None = None, seed: int | None = None) -> BaseExpertScorer:
    """Build a scorer from a CLI-style ranker name."""
    if kind == "peu":
        return PeuScorer(k_a, transform, threshold, fixed_r)
    if kind == "last-peu":
        return LastPeuScorer(k_a, transform, threshold, fixed_r)
    if kind == "frequency":
        return FrequencyScorer(k_act if k_act is not None else k_a)
    if kind == "all-logits":
        return AllLogitsScorer()
    if kind == "act-logits":
        return ActLogitsScorer(k_act if k_act is not None else k_a)
    if kind == "random":
        if seed is None:
            raise ValueError("ranker 'random' requires a seed")
        return RandomScorer(seed)
    raise ValueError(f"unknown ranker {kind!r}; expected one of {RANKER_KINDS}")
