"""Command-line front end.

Subcommands: simulate, calibrate, dcbs, decode, evaluate, compare, bounds.
Exit codes: 0 success, 2 validation error, 3 infeasibility.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

from . import baseline, cover, harness, pac, scorer as scorer_mod
from .errors import InfeasibleError, ValidationError
from .traces import load_traces, save_traces, to_log_traces


def _parse_int_set(text: str) -> frozenset[int]:
    return frozenset(int(x) for x in text.split(",") if x)


def _load_generator(path: str) -> scorer_mod.TabularARModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "contexts" in doc:
        return scorer_mod.load_model(path)
    cfg = scorer_mod.LongTailConfig(
        vocab_size=int(doc["V"]),
        order=int(doc["order"]),
        max_len=int(doc["L"]),
        head_tokens=frozenset(doc["head_tokens"]),
        tail_tokens=frozenset(doc["tail_tokens"]),
        tail_mass=float(doc["tail_mass"]),
        noise=float(doc.get("noise", 0.0)),
        seed=int(doc.get("seed", 0)),
        terminator=int(doc.get("terminator", 0)),
    )
    return scorer_mod.make_longtail_model(cfg)


def cmd_simulate(args) -> int:
    model = _load_generator(args.config)
    traces = scorer_mod.sample_dataset(model, args.n, args.seed)
    save_traces(traces, args.out)
    if args.model_out:
        scorer_mod.save_model(model, args.model_out)
    print(f"wrote {len(traces)} traces to {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    traces = load_traces(args.traces)
    tau_grid = tuple(float(x) for x in args.tau_grid.split(","))
    model, _ = cover.calibrate(
        traces,
        alpha=args.alpha,
        gamma=args.gamma,
        lam=args.lam,
        n_clusters=args.clusters,
        min_count=args.min_count,
        bucket_width=args.bucket_width,
        tau_grid=tau_grid,
        budget=args.budget,
        max_len=args.max_len,
        seed=args.seed,
    )
    cover.save_calibrated(model, args.out)
    print(f"wrote calibrated model to {args.out}")
    return 0


def cmd_dcbs(args) -> int:
    traces = to_log_traces(load_traces(args.traces))
    calib = baseline.dcbs_calibrate(traces, args.alpha, args.max_len)
    doc = {
        "alpha": calib.alpha,
        "thresholds": list(calib.thresholds),
        "surviving_counts": list(calib.surviving_counts),
        "exhausted": calib.exhausted,
        "score_domain": "log",
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    print(f"wrote DCBS calibration to {args.out}")
    return 0


def cmd_decode(args) -> int:
    model = cover.load_calibrated(args.model)
    gen = scorer_mod.load_model(args.ar_model)
    sequences, nodes = cover.cover_decode(
        gen, model, max_len=args.max_len, max_nodes=args.max_nodes
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        for seq in sorted(sequences):
            fh.write(json.dumps({"tokens": list(seq)}))
            fh.write("\n")
    print(f"{len(sequences)} sequences, {nodes} expanded nodes -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    model = cover.load_calibrated(args.model)
    traces = load_traces(args.traces)
    gen = scorer_mod.load_model(args.ar_model) if args.ar_model else None
    tail = set(_parse_int_set(args.tail_tokens)) if args.tail_tokens else None
    report, _ = harness.evaluate(
        model, traces, scorer=gen, tail_tokens=tail, max_nodes=args.max_nodes
    )
    harness.emit_report(report, args.format, args.out)
    print(f"coverage={report.coverage:.4f} -> {args.out}")
    return 0


def cmd_compare(args) -> int:
    reports = []
    for path in args.report:
        with open(path, "r", encoding="utf-8") as fh:
            reports.append(harness.EvalReport.from_doc(json.load(fh)))
    doc = harness.compare(reports)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    print(f"compared {len(reports)} reports -> {args.out}")
    return 0


def cmd_bounds(args) -> int:
    model = cover.load_calibrated(args.model)
    traces = load_traces(args.traces)
    _, records = harness.evaluate(model, traces)
    stats = pac.pair_stats_from_records(records, args.delta, args.zeta)
    if args.variant == "main":
        base = model.alpha
    else:
        base = sum(1 for r in records if not r.covered) / len(records)
    report = pac.full_path_bound(
        stats, base, variant=args.variant,
        zeta_sample_size=args.zeta_n, n_total=len(records),
    )
    doc = {
        "variant": report.variant,
        "base": report.base,
        "aggregate": report.aggregate,
        "aggregate_clipped": report.aggregate_clipped,
        "total_confidence": report.total_confidence,
        "zeta_sample_size": report.zeta_sample_size,
        "per_pair": list(report.per_pair),
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    print(f"bound={report.aggregate:.4f} (clipped {report.aggregate_clipped:.4f}) "
          f"-> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cover-decode")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample traces from a toy generator")
    p.add_argument("--config", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--model-out", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="cluster-step conformal calibration")
    p.add_argument("--traces", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--min-count", type=int, default=20)
    p.add_argument("--bucket-width", type=int, default=1)
    p.add_argument("--tau-grid", default="0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--budget", type=int, default=cover.DEFAULT_BUDGET)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("dcbs", help="dynamic conformal beam-search calibration")
    p.add_argument("--traces", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--max-len", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dcbs)

    p = sub.add_parser("decode", help="expand the conformal prediction set")
    p.add_argument("--model", required=True)
    p.add_argument("--ar-model", required=True)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--max-nodes", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="coverage metrics on fresh traces")
    p.add_argument("--model", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--ar-model", default=None)
    p.add_argument("--tail-tokens", default=None)
    p.add_argument("--max-nodes", type=int, default=None)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="side-by-side evaluation reports")
    p.add_argument("--report", action="append", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bounds", help="PAC bound report for a calibrated model")
    p.add_argument("--model", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--zeta", type=float, default=0.05)
    p.add_argument("--variant", choices=["main", "appendix"], default="main")
    p.add_argument("--zeta-n", choices=["pair", "total"], default="pair")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bounds)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
