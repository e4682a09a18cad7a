"""Seeded synthetic MoE with planted expert roles, for end-to-end verification.

The model is a stack of residual MoE blocks: per layer, router logits are
``W_r @ h``, the top-K logits (ties to the lower index) pick the experts,
gates are a softmax over the selected logits, and
``h <- h + sum_i g_i * E_i(h)`` with two-matrix tanh experts
``E(h) = W2 @ tanh(W1 @ h)``.

Planted structure (per layer, fixed index blocks):

* specialists  - aligned with one domain's input mean plus a large private
  "surge" direction: rarely pooled, decisively top when pooled, with large
  expert outputs. The domain alignment makes surges clear the winning level
  mostly for in-domain tokens.
* distractors  - constant mid-level affinity to the average of all domain
  means: they own the candidate pools of quiet tokens but are never the
  router's decisive choice, and their expert outputs are near-zero.
* backgrounds  - mostly grouped into small cliques sharing one surge
  direction; a clique's members co-dominate pools on high-noise tokens,
  passing confidence filtering together with moderate outputs. A few
  leftover "chaff" backgrounds never reach pools.

Inputs for domain ``t`` are ``x = mu_t + noise_std * R * eps`` with
orthonormal domain means, standard-normal direction ``eps``, and a two-state
radial factor ``R`` (quiet/burst) normalized to unit mean square; bursts are
what let surges beat the distractor wall. Expert output columns live in the
orthogonal complement of every routing direction, so residual updates never
perturb router logits and the planted logit geometry is exact at every layer.

Everything is a deterministic function of (ToySpec, seed) through the
package-wide SplitMix64 streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .manifest import CompiledManifest, ModelSpec
from .rng import derive, normals, uniforms
from .trace import RouterTrace, make_trace

ROLE_BACKGROUND = 0
ROLE_SPECIALIST = 1
ROLE_DISTRACTOR = 2

# Planting shape constants. Levels are fractions of the two ToySpec boosts so
# that zero boosts degrade to an unplanted model; the absolute values are
# calibrated against the reference spec's acceptance margins.
_BURST_FRACTION = 0.5     # share of tokens in the high-noise radial state
_CALM_RATIO = 0.06        # quiet-state radial factor relative to burst state
_GROUP_SIZE = 2           # background clique size
_UBG_FRACTION = 0.84      # share of backgrounds organized into cliques
_UBG_BASE_FRAC = 0.97     # clique base level, fraction of distractor level
_UBG_SURGE_FRAC = 0.30    # clique surge scale, fraction of distractor level
_MEMBER_JITTER_FRAC = 0.01    # within-clique decorrelation, of distractor level
_DIST_JITTER_FRAC = 0.05      # distractor private jitter, of distractor level
_CHAFF_JITTER_FRAC = 0.12     # chaff jitter, of distractor level
_SPEC_ALIGN_FRAC = 0.86       # specialist alignment level, of distractor level
_N_JITTER_DIRS = 6        # shared directions funding private jitters
_MIN_OUTPUT_DIMS = 4
_W1_SCALE = 1.2
_OUT_GAINS = {"specialist": 2.6, "ubg": 0.08, "distractor": 0.02, "chaff": 0.30}

# sub-stream tags
_TAG_MEANS = 1
_TAG_DIRS = 2
_TAG_W1 = 4
_TAG_W2 = 5
_TAG_JMIX = 6
_TAG_INPUT_EPS = 11
_TAG_INPUT_BURST = 12


@dataclass(frozen=True)
class ToySpec:
    num_layers: int
    num_routed_experts: int
    experts_active_per_token: int
    hidden_dim: int
    expert_inner_dim: int
    num_domains: int
    planted_specialists_per_domain: int
    generalist_distractors: int
    specialist_boost: float
    distractor_frequency_boost: float
    noise_std: float
    seed: int

    def __post_init__(self):
        if min(self.num_layers, self.num_routed_experts, self.hidden_dim,
               self.expert_inner_dim, self.num_domains,
               self.experts_active_per_token) < 1:
            raise ValueError("all ToySpec dimensions must be positive")
        if self.experts_active_per_token > self.num_routed_experts:
            raise ValueError("experts_active_per_token exceeds num_routed_experts")
        if self.planted_specialists_per_domain < 0 or self.generalist_distractors < 0:
            raise ValueError("planted role counts must be non-negative")
        planted = (
            self.planted_specialists_per_domain * self.num_domains
            + self.generalist_distractors
        )
        if planted > self.num_routed_experts:
            raise ValueError(
                f"{planted} planted experts exceed num_routed_experts "
                f"({self.num_routed_experts})"
            )
        if self.specialist_boost < 0 or self.distractor_frequency_boost < 0:
            raise ValueError("boosts must be non-negative")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def num_specialists(self) -> int:
        return self.planted_specialists_per_domain * self.num_domains

    @property
    def num_backgrounds(self) -> int:
        return self.num_routed_experts - self.num_specialists - self.generalist_distractors

    def model_spec(self, non_expert_params: int = 0) -> ModelSpec:
        return ModelSpec(
            num_layers=self.num_layers,
            num_routed_experts=self.num_routed_experts,
            experts_active_per_token=self.experts_active_per_token,
            hidden_dim=self.hidden_dim,
            expert_inner_dim=self.expert_inner_dim,
            non_expert_params=non_expert_params,
        )

    def to_json_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_routed_experts": self.num_routed_experts,
            "experts_active_per_token": self.experts_active_per_token,
            "hidden_dim": self.hidden_dim,
            "expert_inner_dim": self.expert_inner_dim,
            "num_domains": self.num_domains,
            "planted_specialists_per_domain": self.planted_specialists_per_domain,
            "generalist_distractors": self.generalist_distractors,
            "specialist_boost": self.specialist_boost,
            "distractor_frequency_boost": self.distractor_frequency_boost,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }


def save_toy_spec(spec: ToySpec, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_toy_spec(path: str | Path) -> ToySpec:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return ToySpec(
        num_layers=int(obj["num_layers"]),
        num_routed_experts=int(obj["num_routed_experts"]),
        experts_active_per_token=int(obj["experts_active_per_token"]),
        hidden_dim=int(obj["hidden_dim"]),
        expert_inner_dim=int(obj["expert_inner_dim"]),
        num_domains=int(obj["num_domains"]),
        planted_specialists_per_domain=int(obj["planted_specialists_per_domain"]),
        generalist_distractors=int(obj["generalist_distractors"]),
        specialist_boost=float(obj["specialist_boost"]),
        distractor_frequency_boost=float(obj["distractor_frequency_boost"]),
        noise_std=float(obj["noise_std"]),
        seed=int(obj["seed"]),
    )


@dataclass(frozen=True)
class ToyMoeModel:
    spec: ToySpec
    domain_means: np.ndarray        # (D, d) orthonormal rows
    router: np.ndarray              # (L, N_r, d)
    w1: np.ndarray                  # (L, N_r, d_ff, d)
    w2: np.ndarray                  # (L, N_r, d, d_ff)
    role_kind: np.ndarray           # (L, N_r) int8, ROLE_* constants
    role_domain: np.ndarray         # (L, N_r) int16, -1 unless specialist

    @property
    def model_id(self) -> str:
        s = self.spec
        return f"toymoe-L{s.num_layers}-E{s.num_routed_experts}-s{s.seed}"

    def specialists(self, layer: int, domain: int) -> np.ndarray:
        mask = (self.role_kind[layer] == ROLE_SPECIALIST) & (self.role_domain[layer] == domain)
        return np.flatnonzero(mask)

    def distractors(self, layer: int) -> np.ndarray:
        return np.flatnonzero(self.role_kind[layer] == ROLE_DISTRACTOR)


def _orthonormal_rows(raw: np.ndarray, against: np.ndarray | None = None) -> np.ndarray:
    """Gram-Schmidt of ``raw`` rows, optionally orthogonal to ``against`` rows."""
    basis: list[np.ndarray] = [] if against is None else [v for v in against]
    out = []
    for row in raw:
        v = row.copy()
        for b in basis:
            v -= (v @ b) * b
        norm = np.linalg.norm(v)
        if norm < 1e-9:
            raise ValueError("degenerate direction while orthonormalizing")
        v /= norm
        basis.append(v)
        out.append(v)
    return np.array(out)


def _burst_factors() -> tuple[float, float]:
    f = _BURST_FRACTION
    r_hi = 1.0 / np.sqrt(f + (1.0 - f) * _CALM_RATIO**2)
    return r_hi * _CALM_RATIO, r_hi


def gen_model(spec: ToySpec) -> ToyMoeModel:
    """Deterministically build the planted model for (spec, spec.seed)."""
    d = spec.hidden_dim
    s_per = spec.planted_specialists_per_domain
    n_spec = spec.num_specialists
    n_dist = spec.generalist_distractors
    n_bg = spec.num_backgrounds
    n_ubg = (int(round(_UBG_FRACTION * n_bg)) // _GROUP_SIZE) * _GROUP_SIZE
    n_groups = n_ubg // _GROUP_SIZE
    n_chaff = n_bg - n_ubg

    n_dirs = spec.num_domains + n_groups + n_spec + _N_JITTER_DIRS
    if n_dirs + _MIN_OUTPUT_DIMS > d:
        raise ValueError(
            f"hidden_dim={d} too small for the planted structure: needs at least "
            f"{n_dirs + _MIN_OUTPUT_DIMS} dimensions"
        )

    seed = spec.seed
    means = _orthonormal_rows(
        normals(derive(seed, _TAG_MEANS), spec.num_domains * d).reshape(spec.num_domains, d)
    )
    extra = _orthonormal_rows(
        normals(derive(seed, _TAG_DIRS), (n_groups + n_spec + _N_JITTER_DIRS) * d).reshape(
            -1, d
        ),
        against=means,
    )
    group_dirs = extra[:n_groups]
    pet_dirs = extra[n_groups:n_groups + n_spec]
    jitter_dirs = extra[n_groups + n_spec:]

    # Expert outputs are confined to the complement of all routing directions,
    # so deeper layers see exactly the same planted logits as layer 0.
    routing = np.vstack([means, extra])
    q, _ = np.linalg.qr(np.eye(d) - routing.T @ routing)
    out_basis = q[:, : d - routing.shape[0]]
    n_out = out_basis.shape[1]

    sigma = spec.noise_std
    _, r_hi = _burst_factors()
    # converts a desired burst-state logit std into a router-row coefficient
    surge_scale = 1.0 / (sigma * r_hi) if sigma > 0 else 0.0

    level_d = spec.distractor_frequency_boost
    mean_sum = means.sum(axis=0) / np.sqrt(spec.num_domains)  # unit, overlap 1/sqrt(D)
    dist_base_row = level_d * np.sqrt(spec.num_domains) * mean_sum
    ubg_base_row = _UBG_BASE_FRAC * level_d * np.sqrt(spec.num_domains) * mean_sum
    align = _SPEC_ALIGN_FRAC * level_d

    num_l, n_r = spec.num_layers, spec.num_routed_experts
    router = np.zeros((num_l, n_r, d))
    role_kind = np.full((num_l, n_r), ROLE_BACKGROUND, dtype=np.int8)
    role_domain = np.full((num_l, n_r), -1, dtype=np.int16)

    # Fixed index blocks, identical across layers:
    # cliques | specialists | distractors | chaff. Clique members sit at the
    # lowest indices so that zero-score tie-breaking (lower index first)
    # deterministically backfills any clique member a short calibration run
    # failed to observe.
    for layer in range(num_l):
        jmix = normals(derive(seed, _TAG_JMIX, layer), n_r * _N_JITTER_DIRS).reshape(
            n_r, _N_JITTER_DIRS
        )
        jmix /= np.linalg.norm(jmix, axis=1, keepdims=True)
        jitter_row = jmix @ jitter_dirs  # unit rows, private per expert

        e = 0
        for j in range(n_ubg):
            group = j // _GROUP_SIZE
            router[layer, e] = (
                ubg_base_row
                + (_UBG_SURGE_FRAC * level_d * surge_scale) * group_dirs[group]
                + (_MEMBER_JITTER_FRAC * level_d * surge_scale) * jitter_row[e]
            )
            e += 1
        for j in range(n_spec):
            dom = j // s_per
            router[layer, e] = align * means[dom] + (
                spec.specialist_boost * surge_scale
            ) * pet_dirs[j]
            role_kind[layer, e] = ROLE_SPECIALIST
            role_domain[layer, e] = dom
            e += 1
        for j in range(n_dist):
            router[layer, e] = dist_base_row + (
                _DIST_JITTER_FRAC * level_d * surge_scale
            ) * jitter_row[e]
            role_kind[layer, e] = ROLE_DISTRACTOR
            e += 1
        for j in range(n_chaff):
            router[layer, e] = (
                _CHAFF_JITTER_FRAC * level_d * surge_scale
            ) * jitter_row[e]
            e += 1

    # expert feed-forward weights
    d_ff = spec.expert_inner_dim
    w1 = normals(derive(seed, _TAG_W1), num_l * n_r * d_ff * d).reshape(
        num_l, n_r, d_ff, d
    ) * (_W1_SCALE / np.sqrt(d))
    coeff = normals(derive(seed, _TAG_W2), num_l * n_r * n_out * d_ff).reshape(
        num_l, n_r, n_out, d_ff
    )
    w2 = np.einsum("do,lnof->lndf", out_basis, coeff, optimize=True)
    # scale per role so output norm is ~gain for a unit-norm input
    # (tanh rms ~0.74 at W1's pre-activation scale)
    base_norm = 0.74 * np.sqrt(d_ff * n_out)
    for layer in range(num_l):
        for e_idx in range(n_r):
            kind = role_kind[layer, e_idx]
            if kind == ROLE_SPECIALIST:
                gain = _OUT_GAINS["specialist"]
            elif kind == ROLE_DISTRACTOR:
                gain = _OUT_GAINS["distractor"]
            elif e_idx >= n_spec + n_dist + n_ubg:
                gain = _OUT_GAINS["chaff"]
            else:
                gain = _OUT_GAINS["ubg"]
            w2[layer, e_idx] *= gain / base_norm

    return ToyMoeModel(
        spec=spec,
        domain_means=means,
        router=router,
        w1=w1,
        w2=w2,
        role_kind=role_kind,
        role_domain=role_domain,
    )


def gen_domain_inputs(spec: ToySpec, domain: int, n: int, seed: int) -> np.ndarray:
    """``n`` input vectors for one domain: mean direction plus radial-state noise.

    Counter-based streams make the first k vectors of a longer request
    identical to a shorter one drawn with the same seed.
    """
    if not (0 <= domain < spec.num_domains):
        raise ValueError(f"domain {domain} out of range [0, {spec.num_domains})")
    if n < 1:
        raise ValueError("n must be positive")
    means = _orthonormal_rows(
        normals(derive(spec.seed, _TAG_MEANS), spec.num_domains * spec.hidden_dim).reshape(
            spec.num_domains, spec.hidden_dim
        )
    )
    eps = normals(derive(seed, _TAG_INPUT_EPS, domain), n * spec.hidden_dim).reshape(
        n, spec.hidden_dim
    )
    burst = uniforms(derive(seed, _TAG_INPUT_BURST, domain), n) < _BURST_FRACTION
    r_lo, r_hi = _burst_factors()
    radial = np.where(burst, r_hi, r_lo)
    return means[domain] + spec.noise_std * radial[:, None] * eps


def _expert_out(model: ToyMoeModel, layer: int, expert: int, h: np.ndarray) -> np.ndarray:
    return model.w2[layer, expert] @ np.tanh(model.w1[layer, expert] @ h)


def _select(logits: np.ndarray, k: int) -> np.ndarray:
    """Top-k positions, descending by logit, ties to the lower position."""
    order = np.argsort(-logits, kind="stable")
    return order[:k]


def _gates(selected_logits: np.ndarray) -> np.ndarray:
    ex = np.exp(selected_logits - selected_logits.max())
    return ex / ex.sum()


def _forward(
    model: ToyMoeModel,
    x: np.ndarray,
    keep: list[np.ndarray],
    k_per_layer: list[int],
    want_logits: bool,
) -> tuple[np.ndarray, np.ndarray | None]:
    h = np.asarray(x, dtype=np.float64).copy()
    spec = model.spec
    logits_out = (
        np.empty((spec.num_layers, spec.num_routed_experts)) if want_logits else None
    )
    for layer in range(spec.num_layers):
        kept = keep[layer]
        logits = model.router[layer, kept] @ h
        if want_logits:
            logits_out[layer] = logits  # only meaningful for the full model
        pool = _select(logits, k_per_layer[layer])
        gates = _gates(logits[pool])
        update = np.zeros_like(h)
        for pos, gate in zip(pool, gates):
            update += gate * _expert_out(model, layer, int(kept[pos]), h)
        h = h + update
    return h, logits_out


def forward_full(model: ToyMoeModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run all layers with every expert available; returns (output, all logits)."""
    spec = model.spec
    keep = [np.arange(spec.num_routed_experts)] * spec.num_layers
    ks = [spec.experts_active_per_token] * spec.num_layers
    out, logits = _forward(model, x, keep, ks, want_logits=True)
    return out, logits


def forward_pruned(model: ToyMoeModel, manifest: CompiledManifest, x: np.ndarray) -> np.ndarray:
    """Run with router rows restricted to kept experts; gates renormalize implicitly."""
    _check_manifest(model, manifest)
    keep = [np.asarray(k, dtype=np.intp) for k in manifest.selection.keep]
    out, _ = _forward(model, x, keep, list(manifest.effective_k), want_logits=False)
    return out


def _check_manifest(model: ToyMoeModel, manifest: CompiledManifest) -> None:
    ms = manifest.model_spec
    spec = model.spec
    if (
        ms.num_layers != spec.num_layers
        or ms.num_routed_experts != spec.num_routed_experts
    ):
        raise ValueError(
            f"manifest shape ({ms.num_layers}, {ms.num_routed_experts}) does not match "
            f"model ({spec.num_layers}, {spec.num_routed_experts})"
        )


def record_trace(model: ToyMoeModel, inputs: np.ndarray, domain_tag: str) -> RouterTrace:
    """One token record per input row, logits from the full forward pass."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[0] == 0:
        raise ValueError("inputs must be non-empty")
    all_logits = np.empty(
        (inputs.shape[0], model.spec.num_layers, model.spec.num_routed_experts)
    )
    for i, x in enumerate(inputs):
        _, logits = forward_full(model, x)
        all_logits[i] = logits
    return make_trace(model.model_id, domain_tag, all_logits.astype(np.float32))


@dataclass(frozen=True)
class EvalReport:
    relative_error: float   # mean over tokens of |full - pruned| / |full|
    cosine_similarity: float
    routing_miss_rate: float  # pruned share of the full model's (token, layer, slot) picks
    planted_recovery: float   # kept fraction of the evaluated domain's specialists

    def to_json_dict(self) -> dict:
        return {
            "relative_error": self.relative_error,
            "cosine_similarity": self.cosine_similarity,
            "routing_miss_rate": self.routing_miss_rate,
            "planted_recovery": self.planted_recovery,
        }


def evaluate(
    model: ToyMoeModel,
    manifest: CompiledManifest,
    inputs: np.ndarray,
    domain: int | None = None,
) -> EvalReport:
    """Compare pruned against full forward passes over a token batch."""
    _check_manifest(model, manifest)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[0] == 0:
        raise ValueError("inputs must be non-empty")
    spec = model.spec
    kept_mask = np.zeros((spec.num_layers, spec.num_routed_experts), dtype=bool)
    for layer, kept in enumerate(manifest.selection.keep):
        kept_mask[layer, list(kept)] = True

    rel_errs, cosines = [], []
    missed = 0
    k = spec.experts_active_per_token
    for x in inputs:
        full, logits = forward_full(model, x)
        pruned = forward_pruned(model, manifest, x)
        diff = np.linalg.norm(full - pruned)
        denom = np.linalg.norm(full)
        rel_errs.append(diff / denom if denom > 0 else 0.0)
        pn = np.linalg.norm(pruned)
        cosines.append(float(full @ pruned / (denom * pn)) if denom > 0 and pn > 0 else 1.0)
        for layer in range(spec.num_layers):
            picks = _select(logits[layer], k)
            missed += int((~kept_mask[layer, picks]).sum())

    if domain is None:
        spec_mask = model.role_kind == ROLE_SPECIALIST
    else:
        spec_mask = (model.role_kind == ROLE_SPECIALIST) & (model.role_domain == domain)
    total_specialists = int(spec_mask.sum())
    recovery = (
        float((spec_mask & kept_mask).sum() / total_specialists)
        if total_specialists
        else 1.0
    )
    return EvalReport(
        relative_error=float(np.mean(rel_errs)),
        cosine_similarity=float(np.mean(cosines)),
        routing_miss_rate=missed / (inputs.shape[0] * spec.num_layers * k),
        planted_recovery=recovery,
    )
