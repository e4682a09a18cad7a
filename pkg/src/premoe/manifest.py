"""Compiled pruning manifests: remaps, router-row pruning, parameter accounting.

A manifest is the deployable description of a pruned instance. It never
carries weights; it tells a loader which expert slots to populate (so the
dense model is never materialized), how old expert indices map to the packed
new ones, which router rows survive, and what the pruned instance costs in
parameters and bytes.

File format (JSON, schema version ``premoe-manifest/1``)::

    {
      "schema_version": "premoe-manifest/1",
      "model_spec": {...},
      "strategy_tag": str,
      "keep": [[int, ...], ...],          # per layer, ascending
      "remap": [[[old, new], ...], ...],  # per layer, sorted by old
      "router_rows_kept": [[int, ...], ...],
      "effective_k": [int, ...],
      "sparsity": {"kept_total": int, "total": int, "sparsity": float,
                    "per_layer_counts": [int, ...]},
      "total_params_kept": int
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .patterns import ExpertSelection, SparsityReport

SCHEMA_VERSION = "premoe-manifest/1"


@dataclass(frozen=True)
class ModelSpec:
    """Shape and parameter accounting of the MoE model being pruned."""

    num_layers: int
    num_routed_experts: int
    experts_active_per_token: int
    hidden_dim: int
    expert_inner_dim: int
    non_expert_params: int = 0
    bias: bool = False

    def __post_init__(self):
        if min(self.num_layers, self.num_routed_experts, self.hidden_dim,
               self.expert_inner_dim, self.experts_active_per_token) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.experts_active_per_token > self.num_routed_experts:
            raise ValueError(
                f"experts_active_per_token ({self.experts_active_per_token}) exceeds "
                f"num_routed_experts ({self.num_routed_experts})"
            )
        if self.non_expert_params < 0:
            raise ValueError("non_expert_params must be >= 0")

    @property
    def params_per_expert(self) -> int:
        # two matrices d -> d_ff -> d, plus optional bias vectors
        p = 2 * self.hidden_dim * self.expert_inner_dim
        if self.bias:
            p += self.hidden_dim + self.expert_inner_dim
        return p

    @property
    def total_params(self) -> int:
        return (
            self.non_expert_params
            + self.params_per_expert * self.num_layers * self.num_routed_experts
        )

    def to_json_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_routed_experts": self.num_routed_experts,
            "experts_active_per_token": self.experts_active_per_token,
            "hidden_dim": self.hidden_dim,
            "expert_inner_dim": self.expert_inner_dim,
            "non_expert_params": self.non_expert_params,
            "bias": self.bias,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ModelSpec":
        return cls(
            num_layers=int(obj["num_layers"]),
            num_routed_experts=int(obj["num_routed_experts"]),
            experts_active_per_token=int(obj["experts_active_per_token"]),
            hidden_dim=int(obj["hidden_dim"]),
            expert_inner_dim=int(obj["expert_inner_dim"]),
            non_expert_params=int(obj.get("non_expert_params", 0)),
            bias=bool(obj.get("bias", False)),
        )


@dataclass(frozen=True)
class CompiledManifest:
    model_spec: ModelSpec
    selection: ExpertSelection
    remap: tuple[tuple[tuple[int, int], ...], ...]
    router_rows_kept: tuple[tuple[int, ...], ...]
    effective_k: tuple[int, ...]
    sparsity_report: SparsityReport
    total_params_kept: int

    def new_index(self, layer: int, old_index: int) -> int:
        for old, new in self.remap[layer]:
            if old == old_index:
                return new
        raise KeyError(f"expert {old_index} is pruned in layer {layer}")


def build_manifest(spec: ModelSpec, selection: ExpertSelection) -> CompiledManifest:
    """Compile a selection against a model shape.

    The per-layer remap packs kept old indices densely (ascending old index ->
    0, 1, ...); router rows for pruned experts are dropped; effective_k clamps
    the per-token activation count to the kept population so routing stays
    well-defined at extreme sparsity.
    """
    if (
        selection.num_layers != spec.num_layers
        or selection.num_experts != spec.num_routed_experts
    ):
        raise ValueError(
            f"selection shape ({selection.num_layers}, {selection.num_experts}) does not "
            f"match model ({spec.num_layers}, {spec.num_routed_experts})"
        )
    remap = tuple(
        tuple((old, new) for new, old in enumerate(kept)) for kept in selection.keep
    )
    effective_k = tuple(
        min(spec.experts_active_per_token, len(kept)) for kept in selection.keep
    )
    report = SparsityReport.from_selection(selection)
    total_kept = spec.non_expert_params + spec.params_per_expert * report.kept_total
    return CompiledManifest(
        model_spec=spec,
        selection=selection,
        remap=remap,
        router_rows_kept=selection.keep,
        effective_k=effective_k,
        sparsity_report=report,
        total_params_kept=total_kept,
    )


def memory_estimate(manifest: CompiledManifest, bytes_per_param: float) -> float:
    """Deployment size in bytes at the given parameter width."""
    if bytes_per_param <= 0:
        raise ValueError("bytes_per_param must be positive")
    return manifest.total_params_kept * bytes_per_param


def write_manifest(manifest: CompiledManifest, path: str | Path) -> None:
    obj = {
        "schema_version": SCHEMA_VERSION,
        "model_spec": manifest.model_spec.to_json_dict(),
        "strategy_tag": manifest.selection.strategy_tag,
        "keep": [list(k) for k in manifest.selection.keep],
        "remap": [[[old, new] for old, new in layer] for layer in manifest.remap],
        "router_rows_kept": [list(k) for k in manifest.router_rows_kept],
        "effective_k": list(manifest.effective_k),
        "sparsity": {
            "kept_total": manifest.sparsity_report.kept_total,
            "total": manifest.sparsity_report.total,
            "sparsity": manifest.sparsity_report.sparsity,
            "per_layer_counts": list(manifest.sparsity_report.per_layer_counts),
        },
        "total_params_kept": manifest.total_params_kept,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


def read_manifest(path: str | Path) -> CompiledManifest:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported manifest schema {version!r}, expected {SCHEMA_VERSION!r}")
    spec = ModelSpec.from_json_dict(obj["model_spec"])
    selection = ExpertSelection(
        num_layers=spec.num_layers,
        num_experts=spec.num_routed_experts,
        keep=tuple(tuple(int(i) for i in k) for k in obj["keep"]),
        strategy_tag=str(obj["strategy_tag"]),
    )
    manifest = build_manifest(spec, selection)
    if manifest.total_params_kept != int(obj["total_params_kept"]):
        raise ValueError("manifest accounting mismatch: file does not match its model spec")
    return manifest
