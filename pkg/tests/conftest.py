import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from premoe.rng import derive
from premoe.toymoe import gen_domain_inputs, gen_model, load_toy_spec, record_trace
from premoe.trace import make_trace

REPO_ROOT = Path(__file__).parent.parent
REF_SPEC_PATH = REPO_ROOT / "toymoe-ref.json"

# seeds used by tests against the reference model; calibration inputs are a
# prefix-stable stream so shorter traces are prefixes of longer ones
CAL_SEED_TAG = 100
EVAL_SEED_TAG = 101


@pytest.fixture(scope="session")
def ref_spec():
    return load_toy_spec(REF_SPEC_PATH)


@pytest.fixture(scope="session")
def ref_model(ref_spec):
    return gen_model(ref_spec)


@pytest.fixture(scope="session")
def ref_traces(ref_spec, ref_model):
    """768-token calibration trace per domain."""
    out = {}
    for domain in range(ref_spec.num_domains):
        x = gen_domain_inputs(ref_spec, domain, 768, derive(ref_spec.seed, CAL_SEED_TAG))
        out[domain] = record_trace(ref_model, x, f"domain-{domain}")
    return out


@pytest.fixture(scope="session")
def ref_eval_inputs(ref_spec):
    return gen_domain_inputs(ref_spec, 0, 192, derive(ref_spec.seed, EVAL_SEED_TAG))


def random_trace(seed: int, tokens: int, layers: int, experts: int,
                 scale: float = 2.0, model_id: str = "test-model",
                 domain_tag: str = "test"):
    """Seeded dense random trace for unit tests."""
    rng = np.random.default_rng(seed)
    logits = rng.normal(0.0, scale, size=(tokens, layers, experts)).astype(np.float32)
    return make_trace(model_id, domain_tag, logits)


@pytest.fixture
def tiny_trace():
    """2 layers x 4 experts x 3 tokens with hand-set logits."""
    logits = np.array(
        [
            [[2.0, 1.0, -1.0, -3.0], [0.5, -0.5, -1.0, -1.0]],
            [[0.9, -0.2, 1.5, 0.1], [1.0, 1.0, 0.0, -2.0]],
            [[-1.0, 0.0, 1.0, 2.0], [3.0, 0.0, 0.0, 0.0]],
        ],
        dtype=np.float32,
    )
    return make_trace("tiny", "unit", logits)
