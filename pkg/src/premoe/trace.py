"""Router-logit calibration traces and their JSONL file format.

A trace records, for every calibration token, the full router-logit vector of
every MoE layer. The on-disk format is JSON Lines:

* line 1 (header):
  ``{"model_id":str,"num_layers":int,"num_routed_experts":int,"domain_tag":str,"token_count":int}``
* one line per token:
  ``{"token_index":int,"layers":[[f32,...],...]}`` with outer length
  ``num_layers`` and inner length ``num_routed_experts``.

Logits are 32-bit floats, serialized as the shortest decimal string that
round-trips to the same float32, so write -> read is bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np


class TraceError(ValueError):
    """Base class for trace validation and parsing failures."""


class TraceParseError(TraceError):
    """A line of a trace file is not valid JSON or misses required keys."""

    def __init__(self, path: str, line_number: int, message: str):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = path
        self.line_number = line_number


class TraceShapeError(TraceError):
    """A logit vector has the wrong length or the layer count is off."""


class TraceValueError(TraceError):
    """A logit is NaN or infinite, or a header field is out of range."""


@dataclass(frozen=True)
class TraceHeader:
    model_id: str
    num_layers: int
    num_routed_experts: int
    domain_tag: str
    token_count: int

    def validate(self) -> None:
        if self.num_layers < 1:
            raise TraceValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_routed_experts < 2:
            raise TraceValueError(
                f"num_routed_experts must be >= 2, got {self.num_routed_experts}"
            )
        if self.token_count < 0:
            raise TraceValueError(f"token_count must be >= 0, got {self.token_count}")


@dataclass(frozen=True)
class TokenRecord:
    """One token's router logits: a float32 array of shape (L, N_r)."""

    token_index: int
    layers: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.layers, dtype=np.float32)
        if arr.ndim != 2:
            raise TraceShapeError(
                f"token {self.token_index}: logits must be 2-D (layers x experts), "
                f"got shape {arr.shape}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "layers", arr)


@dataclass(frozen=True)
class RouterTrace:
    header: TraceHeader
    tokens: tuple[TokenRecord, ...]

    @property
    def num_layers(self) -> int:
        return self.header.num_layers

    @property
    def num_experts(self) -> int:
        return self.header.num_routed_experts

    @property
    def token_count(self) -> int:
        return len(self.tokens)

    def validate(self) -> None:
        self.header.validate()
        if self.header.token_count != len(self.tokens):
            raise TraceValueError(
                f"header token_count {self.header.token_count} != "
                f"{len(self.tokens)} token records"
            )
        shape = (self.header.num_layers, self.header.num_routed_experts)
        for position, tok in enumerate(self.tokens):
            if tok.token_index != position:
                raise TraceValueError(
                    f"token_index {tok.token_index} at position {position}: "
                    "indices must be contiguous from 0"
                )
            if tok.layers.shape != shape:
                raise TraceShapeError(
                    f"token {tok.token_index}: expected logits of shape {shape}, "
                    f"got {tok.layers.shape}"
                )
            if not np.all(np.isfinite(tok.layers)):
                layer = int(np.argwhere(~np.isfinite(tok.layers))[0][0])
                raise TraceValueError(
                    f"token {tok.token_index} layer {layer}: non-finite logit"
                )


def make_trace(
    model_id: str,
    domain_tag: str,
    logits: np.ndarray | Sequence,
) -> RouterTrace:
    """Build a validated trace from a (tokens, L, N_r) array of logits."""
    arr = np.asarray(logits, dtype=np.float32)
    if arr.ndim != 3:
        raise TraceShapeError(f"expected (tokens, layers, experts) array, got shape {arr.shape}")
    t, num_layers, n_experts = arr.shape
    header = TraceHeader(model_id, num_layers, n_experts, domain_tag, t)
    tokens = tuple(TokenRecord(i, arr[i]) for i in range(t))
    trace = RouterTrace(header, tokens)
    trace.validate()
    return trace


def logit_array(trace: RouterTrace) -> np.ndarray:
    """Stack a trace's logits into a (tokens, L, N_r) float32 array."""
    if not trace.tokens:
        return np.zeros((0, trace.num_layers, trace.num_experts), dtype=np.float32)
    return np.stack([tok.layers for tok in trace.tokens])


def _format_f32(value: np.float32) -> str:
    """Shortest decimal that parses back to exactly this float32."""
    v = float(value)
    if math.isinf(v) or math.isnan(v):  # callers validate first; belt and braces
        raise TraceValueError(f"non-finite logit {v!r}")
    a = abs(v)
    if v != 0.0 and (a < 1e-4 or a >= 1e16):
        return np.format_float_scientific(np.float32(v), unique=True, trim="-")
    s = np.format_float_positional(np.float32(v), unique=True, trim="-")
    # bare "-0" parses as integer zero in JSON, losing the sign bit
    return "-0.0" if s == "-0" else s


def _parse_header(path: str, line: str) -> TraceHeader:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceParseError(path, 1, f"malformed header JSON: {exc.msg}") from exc
    try:
        header = TraceHeader(
            model_id=str(obj["model_id"]),
            num_layers=int(obj["num_layers"]),
            num_routed_experts=int(obj["num_routed_experts"]),
            domain_tag=str(obj["domain_tag"]),
            token_count=int(obj["token_count"]),
        )
    except KeyError as exc:
        raise TraceParseError(path, 1, f"header missing field {exc.args[0]!r}") from exc
    header.validate()
    return header


def _reject_nonfinite(value: str):
    raise TraceValueError(f"non-finite logit literal {value!r} in trace file")


def iter_trace(path: str | Path) -> Iterator[TraceHeader | TokenRecord]:
    """Stream a trace file: yields the header first, then one TokenRecord per line.

    Memory use is one token record at a time, independent of file size.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise TraceParseError(str(path), 1, "empty file, expected header line")
        header = _parse_header(str(path), first)
        yield header
        shape = (header.num_layers, header.num_routed_experts)
        for line_number, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line, parse_constant=_reject_nonfinite)
            except json.JSONDecodeError as exc:
                raise TraceParseError(str(path), line_number, f"malformed JSON: {exc.msg}") from exc
            try:
                token_index = int(obj["token_index"])
                layers = obj["layers"]
            except KeyError as exc:
                raise TraceParseError(
                    str(path), line_number, f"token record missing field {exc.args[0]!r}"
                ) from exc
            if len(layers) != shape[0]:
                raise TraceShapeError(
                    f"{path}:{line_number}: token {token_index} has {len(layers)} "
                    f"layer vectors, expected {shape[0]}"
                )
            for layer_idx, vec in enumerate(layers):
                if len(vec) != shape[1]:
                    raise TraceShapeError(
                        f"{path}:{line_number}: token {token_index} layer {layer_idx} "
                        f"has {len(vec)} logits, expected {shape[1]}"
                    )
            arr = np.asarray(layers, dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                layer_idx = int(np.argwhere(~np.isfinite(arr))[0][0])
                raise TraceValueError(
                    f"{path}:{line_number}: token {token_index} layer {layer_idx}: "
                    "non-finite logit"
                )
            yield TokenRecord(token_index, arr)


def read_trace(path: str | Path) -> RouterTrace:
    """Read and validate a full trace file."""
    stream = iter_trace(path)
    header = next(stream)
    assert isinstance(header, TraceHeader)
    tokens = tuple(tok for tok in stream)  # type: ignore[misc]
    trace = RouterTrace(header, tokens)
    trace.validate()
    return trace


def write_trace(trace: RouterTrace, path: str | Path) -> None:
    """Write a trace; ``read_trace`` recovers it bit-exactly."""
    trace.validate()
    h = trace.header
    header_line = json.dumps(
        {
            "model_id": h.model_id,
            "num_layers": h.num_layers,
            "num_routed_experts": h.num_routed_experts,
            "domain_tag": h.domain_tag,
            "token_count": h.token_count,
        },
        separators=(",", ":"),
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header_line + "\n")
        for tok in trace.tokens:
            rows = ",".join(
                "[" + ",".join(_format_f32(v) for v in row) + "]" for row in tok.layers
            )
            fh.write('{"token_index":%d,"layers":[%s]}\n' % (tok.token_index, rows))


def concat_traces(traces: Sequence[RouterTrace] | Iterable[RouterTrace]) -> RouterTrace:
    """Concatenate traces over tokens, reindexing tokens contiguously.

    All traces must agree on layer and expert counts. The result's domain tag
    joins the distinct input tags with '+'.
    """
    traces = list(traces)
    if not traces:
        raise TraceValueError("cannot concatenate zero traces")
    first = traces[0].header
    for t in traces[1:]:
        if (
            t.header.num_layers != first.num_layers
            or t.header.num_routed_experts != first.num_routed_experts
        ):
            raise TraceShapeError(
                "incompatible traces: "
                f"({first.num_layers} layers, {first.num_routed_experts} experts) vs "
                f"({t.header.num_layers} layers, {t.header.num_routed_experts} experts)"
            )
    tags: list[str] = []
    for t in traces:
        if t.header.domain_tag not in tags:
            tags.append(t.header.domain_tag)
    tokens: list[TokenRecord] = []
    for t in traces:
        for tok in t.tokens:
            tokens.append(TokenRecord(len(tokens), tok.layers))
    header = TraceHeader(
        model_id=first.model_id,
        num_layers=first.num_layers,
        num_routed_experts=first.num_routed_experts,
        domain_tag="+".join(tags),
        token_count=len(tokens),
    )
    return RouterTrace(header, tuple(tokens))
