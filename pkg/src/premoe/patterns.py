"""Turning score matrices into kept-expert selections.

Selections are per-layer index sets. Strategies:

* ``select_specialist``   - keep the M best-scoring experts in every layer.
* ``select_last``         - keep the M worst-scoring experts (ranking sanity check).
* ``select_global``       - one budget ranked across all (layer, expert) cells,
  with a floor of one expert per layer.
* ``synthesize_generalist`` - blend several domains' traces token-by-token into
  one pattern (equivalent to scoring the concatenated trace).
* ``trivial_union``       - per-layer union of existing selections.

Ties always break toward the lower layer, then the lower expert index, so
selections are reproducible across implementations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .peu import ComputationalPattern, PeuConfig, accumulate_peu, topk_pool
from .trace import RouterTrace, concat_traces


@dataclass(frozen=True)
class ExpertSelection:
    num_layers: int
    num_experts: int
    keep: tuple[tuple[int, ...], ...]
    strategy_tag: str
    source_pattern_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.keep) != self.num_layers:
            raise ValueError(
                f"{len(self.keep)} keep lists for {self.num_layers} layers"
            )
        normalized = []
        for layer, kept in enumerate(self.keep):
            kept = tuple(sorted(int(i) for i in kept))
            if not kept:
                raise ValueError(f"layer {layer} keeps no experts")
            if len(set(kept)) != len(kept):
                raise ValueError(f"layer {layer} keep list has duplicates")
            if kept[0] < 0 or kept[-1] >= self.num_experts:
                raise ValueError(
                    f"layer {layer} keep indices out of [0, {self.num_experts})"
                )
            normalized.append(kept)
        object.__setattr__(self, "keep", tuple(normalized))

    @property
    def per_layer_counts(self) -> np.ndarray:
        return np.array([len(k) for k in self.keep], dtype=np.int64)

    @property
    def kept_total(self) -> int:
        return int(self.per_layer_counts.sum())


@dataclass(frozen=True)
class SparsityReport:
    kept_total: int
    total: int
    sparsity: float
    per_layer_counts: tuple[int, ...]

    @classmethod
    def from_selection(cls, selection: ExpertSelection) -> "SparsityReport":
        counts = tuple(len(k) for k in selection.keep)
        kept = sum(counts)
        total = selection.num_layers * selection.num_experts
        return cls(kept, total, 1.0 - kept / total, counts)


def write_selection(selection: ExpertSelection, path: str | Path) -> None:
    obj = {
        "strategy_tag": selection.strategy_tag,
        "num_layers": selection.num_layers,
        "num_routed_experts": selection.num_experts,
        "keep": [list(k) for k in selection.keep],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


def read_selection(path: str | Path) -> ExpertSelection:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return ExpertSelection(
        num_layers=int(obj["num_layers"]),
        num_experts=int(obj["num_routed_experts"]),
        keep=tuple(tuple(int(i) for i in k) for k in obj["keep"]),
        strategy_tag=str(obj["strategy_tag"]),
    )


def _as_matrix(pattern: ComputationalPattern | np.ndarray) -> tuple[np.ndarray, tuple[str, ...]]:
    if isinstance(pattern, ComputationalPattern):
        return pattern.scores, (pattern.domain_tag,)
    m = np.asarray(pattern, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"score matrix must be 2-D, got shape {m.shape}")
    return m, ()


def select_specialist(pattern: ComputationalPattern | np.ndarray, m: int) -> ExpertSelection:
    """Keep the M highest-scoring experts per layer (ties to lower index)."""
    scores, sources = _as_matrix(pattern)
    num_layers, num_experts = scores.shape
    if not (1 <= m <= num_experts):
        raise ValueError(f"per-layer budget {m} out of [1, {num_experts}]")
    keep = tuple(tuple(sorted(topk_pool(scores[l], m))) for l in range(num_layers))
    return ExpertSelection(num_layers, num_experts, keep, f"specialist-top{m}", sources)


def select_last(pattern: ComputationalPattern | np.ndarray, m: int) -> ExpertSelection:
    """Keep the M lowest-scoring experts per layer (ties to lower index)."""
    scores, sources = _as_matrix(pattern)
    num_layers, num_experts = scores.shape
    if not (1 <= m <= num_experts):
        raise ValueError(f"per-layer budget {m} out of [1, {num_experts}]")
    keep = []
    for layer in range(num_layers):
        order = np.lexsort((np.arange(num_experts), scores[layer]))
        keep.append(tuple(sorted(int(i) for i in order[:m])))
    return ExpertSelection(num_layers, num_experts, tuple(keep), f"last-bottom{m}", sources)


def select_global(pattern: ComputationalPattern | np.ndarray, total_budget: int) -> ExpertSelection:
    """Keep the best ``total_budget`` cells across all layers, >= 1 per layer.

    Cells are ranked by score descending with ties to (lower layer, lower
    index). If the raw cut leaves a layer empty, that layer's best cell is
    promoted and the globally worst kept cell of a multi-cell layer is demoted,
    repeating until every layer is populated; the budget is conserved exactly.
    """
    scores, sources = _as_matrix(pattern)
    num_layers, num_experts = scores.shape
    if not (num_layers <= total_budget <= num_layers * num_experts):
        raise ValueError(
            f"total budget {total_budget} out of [{num_layers}, {num_layers * num_experts}]"
        )
    flat = scores.reshape(-1)
    layers = np.repeat(np.arange(num_layers), num_experts)
    experts = np.tile(np.arange(num_experts), num_layers)
    order = np.lexsort((experts, layers, -flat))  # rank 0 = best cell
    rank_of = np.empty(order.size, dtype=np.int64)
    rank_of[order] = np.arange(order.size)

    kept = np.zeros(order.size, dtype=bool)
    kept[order[:total_budget]] = True
    counts = np.bincount(layers[kept], minlength=num_layers)

    while np.any(counts == 0):
        layer = int(np.argmin(counts))  # first empty layer
        layer_cells = np.flatnonzero(layers == layer)
        best = layer_cells[np.argmin(rank_of[layer_cells])]
        # demote the worst kept cell among layers that keep at least 2
        demotable = np.flatnonzero(kept & (counts[layers] >= 2))
        victim = demotable[np.argmax(rank_of[demotable])]
        kept[victim] = False
        counts[layers[victim]] -= 1
        kept[best] = True
        counts[layer] += 1

    keep = tuple(
        tuple(sorted(int(e) for e in experts[kept & (layers == l)]))
        for l in range(num_layers)
    )
    return ExpertSelection(
        num_layers, num_experts, keep, f"global-top{total_budget}", sources
    )


def synthesize_generalist(
    traces: Sequence[RouterTrace],
    config: PeuConfig,
    threshold_scope: str = "blended",
) -> ComputationalPattern:
    """Token-weighted multi-domain utility pattern.

    Aggregates every token-level score from every domain's calibration trace
    and divides by the total token count, i.e. scoring the concatenation of the
    traces. Domains with more calibration tokens therefore weigh more; this is
    not a mean of per-domain patterns.

    ``threshold_scope`` controls adaptive thresholds: ``blended`` (default)
    recomputes them on the concatenated stream; ``per-domain`` reuses each
    domain's own thresholds for its tokens and token-weights the scored sums.
    """
    if not traces:
        raise ValueError("at least one trace is required")
    if threshold_scope not in ("blended", "per-domain"):
        raise ValueError(f"unknown threshold_scope {threshold_scope!r}")
    merged = concat_traces(traces)
    if threshold_scope == "blended" or config.threshold != "adaptive":
        return accumulate_peu(merged, config)
    per_domain = [accumulate_peu(t, config) for t in traces]
    total = sum(t.token_count for t in traces)
    scores = np.zeros_like(per_domain[0].scores)
    for trace, pat in zip(traces, per_domain):
        scores += pat.scores * (trace.token_count / total)
    thresholds = np.zeros(merged.num_layers, dtype=np.float64)
    for trace, pat in zip(traces, per_domain):
        thresholds += pat.thresholds * (trace.token_count / total)
    return ComputationalPattern(
        model_id=merged.header.model_id,
        domain_tag=merged.header.domain_tag,
        num_layers=merged.num_layers,
        num_experts=merged.num_experts,
        token_count=total,
        config=config,
        thresholds=thresholds,
        scores=scores,
    )


def trivial_union(selections: Sequence[ExpertSelection]) -> ExpertSelection:
    """Per-layer union of selections; the multi-domain baseline."""
    if not selections:
        raise ValueError("at least one selection is required")
    first = selections[0]
    for s in selections[1:]:
        if s.num_layers != first.num_layers or s.num_experts != first.num_experts:
            raise ValueError(
                f"incompatible selections: ({first.num_layers}, {first.num_experts}) "
                f"vs ({s.num_layers}, {s.num_experts})"
            )
    keep = tuple(
        tuple(sorted(set().union(*(s.keep[l] for s in selections))))
        for l in range(first.num_layers)
    )
    sources = tuple(pid for s in selections for pid in s.source_pattern_ids)
    return ExpertSelection(
        first.num_layers, first.num_experts, keep, "trivial-union", sources
    )


def overlap_curve(
    pattern_a: ComputationalPattern | np.ndarray,
    pattern_b: ComputationalPattern | np.ndarray,
    ks: Sequence[int],
) -> list[tuple[int, float]]:
    """Mean per-layer overlap fraction of the two patterns' top-k expert sets."""
    a, _ = _as_matrix(pattern_a)
    b, _ = _as_matrix(pattern_b)
    if a.shape != b.shape:
        raise ValueError(f"pattern shapes differ: {a.shape} vs {b.shape}")
    num_layers, num_experts = a.shape
    out = []
    for k in ks:
        if not (1 <= k <= num_experts):
            raise ValueError(f"k={k} out of [1, {num_experts}]")
        fractions = []
        for layer in range(num_layers):
            top_a = set(topk_pool(a[layer], k).tolist())
            top_b = set(topk_pool(b[layer], k).tolist())
            fractions.append(len(top_a & top_b) / k)
        out.append((int(k), float(np.mean(fractions))))
    return out
