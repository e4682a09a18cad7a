"""Command-line pipeline: trace-gen, analyze, compile, eval, report.

Every run is a pure function of its flags and input files; outputs are
written atomically (temp file in the target directory, then rename), so a
failed run leaves no partial files. Exit codes: 0 success, 1 data error,
2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .manifest import build_manifest, read_manifest, write_manifest
from .patterns import (
    read_selection,
    select_global,
    select_last,
    select_specialist,
    synthesize_generalist,
    trivial_union,
    write_selection,
)
from .peu import PeuConfig, read_pattern, write_pattern
from .rankers import RANKER_KINDS, make_scorer
from .rng import derive
from .toymoe import (
    evaluate,
    gen_domain_inputs,
    gen_model,
    load_toy_spec,
    record_trace,
)
from .trace import read_trace, write_trace

_EVAL_SEED_TAG = 101
_TRACE_SEED_TAG = 100


def _atomic_write(path: str, writer) -> None:
    """Call ``writer(tmp_path)`` then rename tmp onto ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".premoe-tmp-")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cmd_trace_gen(args) -> int:
    spec = load_toy_spec(args.spec)
    model = gen_model(spec)
    seed = args.seed if args.seed is not None else derive(spec.seed, _TRACE_SEED_TAG)
    inputs = gen_domain_inputs(spec, args.domain, args.tokens, seed)
    trace = record_trace(model, inputs, domain_tag=f"domain-{args.domain}")
    _atomic_write(args.out, lambda tmp: write_trace(trace, tmp))
    print(f"wrote {args.out}: {trace.token_count} tokens, "
          f"{trace.num_layers} layers x {trace.num_experts} experts")
    return 0


def _cmd_analyze(args) -> int:
    traces = [read_trace(p) for p in args.trace]
    if args.ranker == "peu" and len(traces) > 1:
        config = PeuConfig(args.k_a, args.transform, args.threshold, args.fixed_r)
        pattern = synthesize_generalist(traces, config, threshold_scope=args.threshold_scope)
    else:
        if len(traces) > 1:
            raise SystemExit2(f"ranker {args.ranker!r} accepts a single trace")
        if args.ranker == "random" and args.seed is None:
            raise SystemExit2("--ranker random requires --seed")
        scorer = make_scorer(
            args.ranker,
            k_a=args.k_a,
            transform=args.transform,
            threshold=args.threshold,
            fixed_r=args.fixed_r,
            k_act=args.k_act,
            seed=args.seed,
        )
        pattern = scorer.fit(traces[0]).pattern_
    _atomic_write(args.out, lambda tmp: write_pattern(pattern, tmp))
    print(f"wrote {args.out}: ranker={args.ranker}, "
          f"{pattern.num_layers} layers x {pattern.num_experts} experts, "
          f"{pattern.token_count} tokens")
    return 0


def _cmd_compile(args) -> int:
    modes = [args.per_layer is not None, args.global_budget is not None,
             args.last is not None, bool(args.union)]
    if sum(modes) != 1:
        raise SystemExit2("exactly one of --per-layer/--global-budget/--last/--union required")
    if args.union:
        selections = [read_selection(p) for p in args.union]
        selection = trivial_union(selections)
    else:
        if not args.pattern:
            raise SystemExit2("--pattern is required unless --union is used")
        pattern = read_pattern(args.pattern)
        if args.per_layer is not None:
            selection = select_specialist(pattern, args.per_layer)
        elif args.last is not None:
            selection = select_last(pattern, args.last)
        else:
            selection = select_global(pattern, args.global_budget)
    _atomic_write(args.out, lambda tmp: write_selection(selection, tmp))
    counts = selection.per_layer_counts
    print(f"wrote {args.out}: {selection.strategy_tag}, kept {counts.sum()} of "
          f"{selection.num_layers * selection.num_experts}")
    if args.manifest_out:
        if not args.spec:
            raise SystemExit2("--manifest-out requires --spec")
        toy = load_toy_spec(args.spec)
        manifest = build_manifest(toy.model_spec(), selection)
        _atomic_write(args.manifest_out, lambda tmp: write_manifest(manifest, tmp))
        print(f"wrote {args.manifest_out}: sparsity "
              f"{manifest.sparsity_report.sparsity:.4f}, "
              f"params {manifest.total_params_kept}")
    return 0


def _cmd_eval(args) -> int:
    spec = load_toy_spec(args.spec)
    model = gen_model(spec)
    if args.manifest:
        manifest = read_manifest(args.manifest)
    else:
        if not args.selection:
            raise SystemExit2("one of --manifest/--selection is required")
        selection = read_selection(args.selection)
        manifest = build_manifest(spec.model_spec(), selection)
    seed = args.seed if args.seed is not None else derive(spec.seed, _EVAL_SEED_TAG)
    inputs = gen_domain_inputs(spec, args.domain, args.tokens, seed)
    report = evaluate(model, manifest, inputs, domain=args.domain)
    payload = json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        _atomic_write(args.out, lambda tmp: Path(tmp).write_text(payload, encoding="utf-8"))
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(payload)
    return 0


def _sweep_rows(args) -> list[dict]:
    spec = load_toy_spec(args.spec)
    model = gen_model(spec)
    trace_seed = derive(spec.seed, _TRACE_SEED_TAG)
    eval_seed = derive(spec.seed, _EVAL_SEED_TAG)
    cal_inputs = gen_domain_inputs(spec, args.domain, args.tokens, trace_seed)
    eval_inputs = gen_domain_inputs(spec, args.domain, args.eval_tokens, eval_seed)
    trace = record_trace(model, cal_inputs, domain_tag=f"domain-{args.domain}")
    rows = []
    total = spec.num_layers * spec.num_routed_experts
    for ranker in args.rankers:
        scorer = make_scorer(
            ranker, k_a=args.k_a, transform=args.transform,
            threshold=args.threshold, fixed_r=args.fixed_r,
            k_act=args.k_act, seed=args.seed if args.seed is not None else 0,
        )
        pattern = scorer.fit(trace).pattern_
        for budget in args.budgets:
            selection = select_specialist(pattern, budget)
            manifest = build_manifest(spec.model_spec(), selection)
            report = evaluate(model, manifest, eval_inputs, domain=args.domain)
            rows.append({
                "budget": budget,
                "sparsity": 1.0 - selection.kept_total / total,
                "ranker": ranker,
                "relative_error": report.relative_error,
                "cosine": report.cosine_similarity,
                "miss_rate": report.routing_miss_rate,
                "recovery": report.planted_recovery,
                "params_kept": manifest.total_params_kept,
            })
    return rows


_SWEEP_COLUMNS = ["budget", "sparsity", "ranker", "relative_error", "cosine",
                  "miss_rate", "recovery", "params_kept"]


def _format_cell(value) -> str:
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def _cmd_report(args) -> int:
    if args.heatmap:
        pattern = read_pattern(args.heatmap)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for row in pattern.scores:
            writer.writerow([_format_cell(float(v)) for v in row])
        payload = buf.getvalue()
    else:
        if not args.spec:
            raise SystemExit2("either --heatmap or --spec is required")
        rows = _sweep_rows(args)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=_SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format_cell(v) for k, v in row.items()})
        payload = buf.getvalue()
    if args.out:
        _atomic_write(args.out, lambda tmp: Path(tmp).write_text(payload, encoding="utf-8"))
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(payload)
    return 0


class SystemExit2(Exception):
    """Usage error surfaced with exit code 2."""


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="premoe",
        description="Router-trace analysis, expert selection, and pruning-manifest compilation.",
    )
    parser.add_argument(
        "--version", action="version",
        version=(f"premoe {__version__} (schemas: premoe-trace/1, premoe-pattern/1, "
                 "premoe-selection/1, premoe-manifest/1)"),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("trace-gen", help="simulate a domain calibration trace")
    p.add_argument("--spec", required=True, help="toy model spec JSON")
    p.add_argument("--domain", type=int, required=True)
    p.add_argument("--tokens", type=int, required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="input-noise seed (default: derived from the spec seed)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_trace_gen)

    p = sub.add_parser("analyze", help="score a trace into a pattern file")
    p.add_argument("--trace", required=True, nargs="+",
                   help="trace file(s); several traces blend into a generalist pattern")
    p.add_argument("--ranker", choices=RANKER_KINDS, default="peu")
    p.add_argument("--k-a", type=int, default=8, dest="k_a")
    p.add_argument("--transform", default="rectifier",
                   choices=("raw", "sigmoid", "rectifier", "exp"))
    p.add_argument("--threshold", default="adaptive", choices=("adaptive", "fixed", "none"))
    p.add_argument("--fixed-r", type=float, default=None, dest="fixed_r")
    p.add_argument("--threshold-scope", default="blended", choices=("blended", "per-domain"),
                   dest="threshold_scope",
                   help="adaptive thresholds for blended patterns: recompute on the "
                        "combined stream or reuse per-domain values")
    p.add_argument("--k-act", type=int, default=None, dest="k_act",
                   help="pool size for frequency/act-logits (default: --k-a)")
    p.add_argument("--seed", type=int, default=None, help="seed for --ranker random")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("compile", help="select experts and optionally build a manifest")
    p.add_argument("--pattern", default=None)
    p.add_argument("--per-layer", type=int, default=None, dest="per_layer")
    p.add_argument("--global-budget", type=int, default=None, dest="global_budget")
    p.add_argument("--last", type=int, default=None,
                   help="keep the bottom-ranked experts per layer")
    p.add_argument("--union", nargs="*", default=None,
                   help="selection files to union instead of selecting from a pattern")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", default=None, help="toy model spec JSON for --manifest-out")
    p.add_argument("--manifest-out", default=None, dest="manifest_out")
    p.set_defaults(func=_cmd_compile)

    p = sub.add_parser("eval", help="compare pruned vs full toy model")
    p.add_argument("--spec", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--selection", default=None)
    p.add_argument("--domain", type=int, required=True)
    p.add_argument("--tokens", type=int, default=256)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="sparsity-sweep CSV or pattern heatmap CSV")
    p.add_argument("--spec", default=None)
    p.add_argument("--domain", type=int, default=0)
    p.add_argument("--tokens", type=int, default=256)
    p.add_argument("--eval-tokens", type=int, default=128, dest="eval_tokens")
    p.add_argument("--rankers", nargs="+", default=["peu"],
                   choices=RANKER_KINDS)
    p.add_argument("--budgets", type=int, nargs="+", default=None)
    p.add_argument("--k-a", type=int, default=8, dest="k_a")
    p.add_argument("--transform", default="rectifier",
                   choices=("raw", "sigmoid", "rectifier", "exp"))
    p.add_argument("--threshold", default="adaptive", choices=("adaptive", "fixed", "none"))
    p.add_argument("--fixed-r", type=float, default=None, dest="fixed_r")
    p.add_argument("--k-act", type=int, default=None, dest="k_act")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--heatmap", default=None,
                   help="pattern file to dump as an L x N_r score CSV instead of sweeping")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    if getattr(args, "command", None) == "report" and not args.heatmap and args.budgets is None:
        print("premoe report: --budgets is required for sweeps", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except SystemExit2 as exc:
        print(f"premoe {args.command}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"premoe {args.command}: missing file: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"premoe {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
