import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from premoe.trace import (
    RouterTrace,
    TraceHeader,
    TraceParseError,
    TraceShapeError,
    TraceValueError,
    concat_traces,
    make_trace,
    read_trace,
    write_trace,
)

from conftest import random_trace


def test_minimal_round_trip(tmp_path):
    logits = np.array([[[1.0, -2.5, 0.125, 3.0], [0.1, 0.2, 0.3, 0.4]]], dtype=np.float32)
    trace = make_trace("m", "math", logits)
    path = tmp_path / "t.jsonl"
    write_trace(trace, path)
    back = read_trace(path)
    assert back.header == trace.header
    assert back.token_count == 1
    assert np.array_equal(back.tokens[0].layers, trace.tokens[0].layers)


def test_round_trip_bit_exact_random(tmp_path):
    trace = random_trace(seed=5, tokens=17, layers=3, experts=6, scale=30.0)
    path = tmp_path / "t.jsonl"
    write_trace(trace, path)
    back = read_trace(path)
    for a, b in zip(trace.tokens, back.tokens):
        assert a.layers.tobytes() == b.layers.tobytes()


@settings(max_examples=200, deadline=None)
@given(st.lists(
    st.floats(width=32, allow_nan=False, allow_infinity=False),
    min_size=4, max_size=4,
))
def test_round_trip_bit_exact_hypothesis(tmp_path_factory, vec):
    trace = make_trace("m", "d", np.array([[vec, vec]], dtype=np.float32))
    path = tmp_path_factory.mktemp("tr") / "t.jsonl"
    write_trace(trace, path)
    back = read_trace(path)
    assert back.tokens[0].layers.tobytes() == trace.tokens[0].layers.tobytes()


def test_empty_trace_round_trip(tmp_path):
    header = TraceHeader("m", 2, 4, "empty", 0)
    trace = RouterTrace(header, ())
    path = tmp_path / "t.jsonl"
    write_trace(trace, path)
    back = read_trace(path)
    assert back.token_count == 0
    assert back.header == header


def test_wrong_vector_length_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"model_id":"m","num_layers":1,"num_routed_experts":4,"domain_tag":"d","token_count":1}\n'
        '{"token_index":0,"layers":[[1.0,2.0,3.0]]}\n'
    )
    with pytest.raises(TraceShapeError) as err:
        read_trace(path)
    assert "layer 0" in str(err.value)
    assert "token 0" in str(err.value)


def test_malformed_json_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"model_id":"m","num_layers":1,"num_routed_experts":2,"domain_tag":"d","token_count":2}\n'
        '{"token_index":0,"layers":[[1.0,2.0]]}\n'
        '{"token_index":1,"layers":[[1.0,2.0]\n'
    )
    with pytest.raises(TraceParseError) as err:
        read_trace(path)
    assert err.value.line_number == 3


def test_nonfinite_logit_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"model_id":"m","num_layers":1,"num_routed_experts":2,"domain_tag":"d","token_count":1}\n'
        '{"token_index":0,"layers":[[1.0,NaN]]}\n'
    )
    with pytest.raises(TraceValueError):
        read_trace(path)


def test_token_count_mismatch_rejected_before_write(tmp_path):
    logits = np.zeros((2, 1, 4), dtype=np.float32)
    good = make_trace("m", "d", logits)
    bad = RouterTrace(
        TraceHeader("m", 1, 4, "d", token_count=3), good.tokens
    )
    path = tmp_path / "t.jsonl"
    with pytest.raises(TraceValueError):
        write_trace(bad, path)
    assert not path.exists()


def test_make_trace_validates_invariants():
    with pytest.raises(TraceShapeError):
        make_trace("m", "d", np.zeros((3, 4), dtype=np.float32))
    with pytest.raises(TraceValueError):
        make_trace("m", "d", np.array([[[np.inf, 0.0]]], dtype=np.float32))


def test_concat_counts_and_order():
    a = random_trace(seed=1, tokens=3, layers=2, experts=4)
    b = random_trace(seed=2, tokens=2, layers=2, experts=4, domain_tag="other")
    merged = concat_traces([a, b])
    assert merged.token_count == 5
    assert [t.token_index for t in merged.tokens] == [0, 1, 2, 3, 4]
    for i in range(3):
        assert np.array_equal(merged.tokens[i].layers, a.tokens[i].layers)
    for i in range(2):
        assert np.array_equal(merged.tokens[3 + i].layers, b.tokens[i].layers)
    assert merged.header.domain_tag == "test+other"


def test_concat_single_is_identity_up_to_indices():
    a = random_trace(seed=3, tokens=4, layers=2, experts=4)
    merged = concat_traces([a])
    assert merged.token_count == a.token_count
    for x, y in zip(merged.tokens, a.tokens):
        assert np.array_equal(x.layers, y.layers)


def test_concat_incompatible_rejected():
    a = random_trace(seed=1, tokens=2, layers=2, experts=4)
    b = random_trace(seed=2, tokens=2, layers=2, experts=8)
    with pytest.raises(TraceShapeError):
        concat_traces([a, b])


def test_header_invariants():
    with pytest.raises(TraceValueError):
        TraceHeader("m", 0, 4, "d", 0).validate()
    with pytest.raises(TraceValueError):
        TraceHeader("m", 1, 1, "d", 0).validate()


def test_float32_shortest_serialization(tmp_path):
    # 0.1 is not exactly representable; the file should carry the short form
    trace = make_trace("m", "d", np.array([[[0.1, 1.0]]], dtype=np.float32))
    path = tmp_path / "t.jsonl"
    write_trace(trace, path)
    body = path.read_text().splitlines()[1]
    assert json.loads(body)["layers"] == [[0.1, 1.0]]
    assert "0.10000000149" not in body
