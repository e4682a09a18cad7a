"""Expert-utility scoring and pruning-manifest compilation for MoE routers.

Pipeline: record router-logit traces on calibration data, score experts per
layer (confidence-filtered transformed logits by default), select keep-sets
per domain or blended across domains, and compile deployable pruning
manifests. A seeded toy MoE with planted expert roles makes the whole chain
verifiable at desk scale.
"""

from .manifest import (
    CompiledManifest,
    ModelSpec,
    build_manifest,
    memory_estimate,
    read_manifest,
    write_manifest,
)
from .patterns import (
    ExpertSelection,
    SparsityReport,
    overlap_curve,
    read_selection,
    select_global,
    select_last,
    select_specialist,
    synthesize_generalist,
    trivial_union,
    write_selection,
)
from .peu import (
    ComputationalPattern,
    PeuConfig,
    accumulate_peu,
    adaptive_thresholds,
    local_softmax,
    read_pattern,
    token_scores,
    topk_pool,
    transform,
    write_pattern,
)
from .rankers import (
    ActLogitsScorer,
    AllLogitsScorer,
    BaseExpertScorer,
    FrequencyScorer,
    LastPeuScorer,
    PeuScorer,
    RandomScorer,
    act_logits_scores,
    all_logits_scores,
    frequency_scores,
    make_scorer,
    random_scores,
)
from .toymoe import (
    EvalReport,
    ToyMoeModel,
    ToySpec,
    evaluate,
    forward_full,
    forward_pruned,
    gen_domain_inputs,
    gen_model,
    load_toy_spec,
    record_trace,
    save_toy_spec,
)
from .trace import (
    RouterTrace,
    TokenRecord,
    TraceHeader,
    concat_traces,
    make_trace,
    read_trace,
    write_trace,
)

__version__ = "0.1.0"

TRACE_SCHEMA = "premoe-trace/1"
PATTERN_SCHEMA = "premoe-pattern/1"
SELECTION_SCHEMA = "premoe-selection/1"
MANIFEST_SCHEMA = "premoe-manifest/1"
