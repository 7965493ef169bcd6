"""Command line: analyze, simulate, gen-traffic, corpus-check, rebalance.

Exit status: 0 feasible / equivalent, 2 fell back to locks, 1 error.
"""

from __future__ import annotations

import argparse
import random
import sys
import time
from pathlib import Path

from .corpus import CorpusError, load_corpus
from .keygen import KeySearchConfig, NoAcceptableKey
from .nf.execute import exec_sequential
from .nf.model import ModelError, load_model
from .nf.packet import Trace
from .parsim import (
    SimConfig,
    TrafficSpec,
    check_equivalence,
    exec_lock_based,
    exec_shared_nothing,
    gen_traffic,
    measure_skew,
)
from .parsim.skew import slot_histogram
from .pipeline import EXIT_ERROR, EXIT_OK, STRATEGIES, AnalysisRefused, analyze, solve
from .rss import IndirectionTable, RssConfigBundle, core_loads, load_profile, rebalance_table


def _seed(args) -> int:
    if args.seed is None:
        args.seed = random.SystemRandom().randrange(2**32)
        print(f"seed: {args.seed} (drawn; pass --seed {args.seed} to reproduce)")
    return args.seed


def _load_trace(path) -> Trace:
    trace = Trace.load(path)
    trace.validate()
    return trace


def _table_for(bundle: RssConfigBundle, cores: int) -> RssConfigBundle:
    """Keep the configured tables when they spread over exactly ``cores`` cores."""
    tables = {c.table for c in bundle.configs.values()}
    if len(tables) == 1 and next(iter(tables)).cores == cores:
        return bundle
    size = next(iter(bundle.configs.values())).table.size
    return bundle.with_tables(IndirectionTable.round_robin(cores, size))


# -- analyze ---------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    seed = _seed(args)
    model = load_model(args.model)
    profile = load_profile(args.profile)
    config = KeySearchConfig(workers=args.workers, seed=seed, verify_samples=args.samples, cores=args.cores)
    try:
        rep = analyze(model, profile, args.strategy, seed, config)
    except AnalysisRefused as e:
        print(e.report.to_text(), end="")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    text = rep.to_text()
    print(text, end="")
    out = args.out or f"{Path(args.model).stem}.rss"
    rep.bundle.save(out)
    print(f"rss config written to {out}")
    if args.report:
        Path(args.report).write_text(text)
    if rep.fallback:
        print(f"{model.name}: shared-nothing infeasible, lock-based configuration emitted", file=sys.stderr)
    return rep.exit_code


# -- simulate --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    model = load_model(args.model)
    trace = _load_trace(args.trace)
    bundle = RssConfigBundle.load(args.config) if args.config else None
    if bundle is not None:
        missing = sorted(set(model.interfaces) - set(bundle.configs))
        extra = sorted(set(bundle.configs) - set(model.interfaces))
        if missing or extra:
            print(f"error: config interfaces {sorted(bundle.configs)} do not match model interfaces "
                  f"{list(model.interfaces)}", file=sys.stderr)
            return EXIT_ERROR
    unknown = sorted({p.in_iface for p in trace} - set(model.interfaces))
    if unknown:
        print(f"error: trace uses interfaces {unknown} unknown to the model", file=sys.stderr)
        return EXIT_ERROR
    cfg = SimConfig(args.cores, args.capacity_mode, args.seed or 0)
    seq = exec_sequential(model, trace)
    if args.mode == "shared-nothing":
        sol, _, _ = solve(model, load_profile(args.profile))
        if not sol.diagnosis.feasible:
            print(f"{model.name}: shared-nothing refused, the model cannot be sharded")
            for r in sol.diagnosis.reasons:
                print(f"  {r}")
            return EXIT_ERROR
        if bundle is None:
            print("error: shared-nothing simulation needs --config", file=sys.stderr)
            return EXIT_ERROR
        bundle = _table_for(bundle, args.cores)
        par, metrics = exec_shared_nothing(model, bundle, trace, cfg)
    else:
        if bundle is not None:
            bundle = _table_for(bundle, args.cores)
        par, metrics = exec_lock_based(model, trace, cfg, bundle)
    eq = check_equivalence(seq, par, model.abstractions)
    print(f"model: {model.name}  mode: {args.mode}  cores: {args.cores}  capacity: {args.capacity_mode}")
    print(eq.to_text())
    print(metrics.to_text())
    if bundle is not None:
        table = next(iter(bundle.configs.values())).table
        print(measure_skew(metrics, table, bundle, trace).to_text())
    if args.csv:
        Path(args.csv).write_text(metrics.to_csv())
    ok = eq.equivalent and (args.mode != "shared-nothing" or metrics.cross_core_accesses == 0)
    return EXIT_OK if ok else EXIT_ERROR


# -- gen-traffic -----------------------------------------------------------------------

def cmd_gen_traffic(args) -> int:
    seed = _seed(args)
    spec = TrafficSpec(
        distribution=args.dist, packets=args.packets, flows=args.flows, zipf_s=args.zipf_s,
        churn=args.churn, size=args.size, reply_ratio=args.reply_ratio, unsolicited=args.unsolicited,
        origin=args.origin, reply_iface=args.reply_iface, gap=args.gap,
    )
    trace = gen_traffic(spec, seed)
    if args.format == "binary":
        Path(args.out).write_bytes(trace.to_bytes())
    else:
        Path(args.out).write_text(trace.to_text())
    print(f"{len(trace)} packets, {spec.flows} flows ({spec.distribution}) written to {args.out}")
    return EXIT_OK


# -- corpus-check ----------------------------------------------------------------------

def cmd_corpus_check(args) -> int:
    seed = args.seed if args.seed is not None else 0
    try:
        entries = load_corpus(args.dir)
    except CorpusError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    cores = [int(c) for c in args.cores.split(",")]
    profile = load_profile(args.profile)
    rows = []
    failed = False
    for e in entries:
        t0 = time.time()
        model = e.model()
        problems = []
        rep = analyze(model, profile, "auto", seed, KeySearchConfig(seed=seed, verify_samples=args.samples))
        if rep.verdict != e.verdict:
            problems.append(f"verdict {rep.verdict}, expected {e.verdict}")
        if e.fields and rep.sharding_fields != e.fields:
            problems.append(f"fields {rep.sharding_fields}, expected {e.fields}")
        rules = {r.rule for r in rep.reasons}
        if e.rule and e.rule not in rules:
            problems.append(f"no {e.rule} in diagnosis")
        if rep.verification is not None and not rep.verification.ok:
            problems.append(f"{rep.verification.violations} key violations")
        trace = e.trace(seed, packets=args.packets)
        seq = exec_sequential(model, trace)
        for c in cores:
            if rep.mode == "shared-nothing":
                par, m = exec_shared_nothing(model, _table_for(rep.bundle, c), trace, SimConfig(c, "replicate"))
                if m.cross_core_accesses:
                    problems.append(f"{m.cross_core_accesses} cross-core accesses on {c} cores")
            else:
                par, m = exec_lock_based(model, trace, SimConfig(c, seed=seed))
            eq = check_equivalence(seq, par, model.abstractions)
            if not eq.equivalent:
                problems.append(f"{eq.total_mismatches} mismatches on {c} cores ({rep.mode})")
        fields = "; ".join(f"{i}: {','.join(f)}" for i, f in rep.sharding_fields.items()) or "-"
        rule = ",".join(sorted(rules - {"-"})) or "-"
        rows.append((e.name, rep.verdict, rep.mode, fields, rule, "ok" if not problems else "FAIL",
                     f"{time.time() - t0:.1f}s"))
        for p in problems:
            rows.append(("", "", "", f"  {p}", "", "", ""))
        failed |= bool(problems)
    head = ("nf", "verdict", "config", "sharding fields", "rules", "status", "time")
    widths = [max(len(str(r[k])) for r in rows + [head]) for k in range(len(head))]
    for r in [head] + rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip())
    print(f"corpus-check: {'FAILED' if failed else 'all entries pass'}")
    return EXIT_ERROR if failed else EXIT_OK


# -- rebalance -------------------------------------------------------------------------

def cmd_rebalance(args) -> int:
    bundle = RssConfigBundle.load(args.config)
    trace = _load_trace(args.trace)
    bundle = _table_for(bundle, args.cores)
    table = next(iter(bundle.configs.values())).table
    hist, default = slot_histogram(bundle, trace)
    before = core_loads(table, hist, args.cores)
    new = rebalance_table(table, hist, args.cores)
    after = core_loads(new, hist, args.cores)
    for loads in (before, after):
        loads[0] += default
    mean = sum(before) / args.cores
    print(f"max/mean before: {max(before) / mean:.4f}" if mean else "empty trace")
    if mean:
        print(f"max/mean after:  {max(after) / mean:.4f}")
    out = bundle.with_tables(new)
    out.provenance["rebalanced"] = Path(args.trace).name
    out.save(args.out)
    print(f"rebalanced config written to {args.out}")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nfshard", description="Shared-nothing sharding and RSS keys for NF models.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="analyze a model and emit an RSS configuration")
    a.add_argument("model")
    a.add_argument("--profile", default="e810", help="NIC profile name or YAML path")
    a.add_argument("--strategy", choices=STRATEGIES, default="auto")
    a.add_argument("--seed", type=int)
    a.add_argument("--out", help="RSS config path (default: <model>.rss)")
    a.add_argument("--report", help="also write the report here")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--samples", type=int, default=100_000, help="verification samples per disjunct")
    a.add_argument("--cores", type=int, default=16, help="cores the indirection tables spread over")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run a trace sequentially and in parallel and compare")
    s.add_argument("model")
    s.add_argument("--config", help="RSS config from analyze")
    s.add_argument("--trace", required=True)
    s.add_argument("--cores", type=int, default=4)
    s.add_argument("--mode", choices=("shared-nothing", "locks"), default="shared-nothing")
    s.add_argument("--capacity-mode", choices=("shard", "replicate"), default="shard")
    s.add_argument("--profile", default="e810")
    s.add_argument("--seed", type=int)
    s.add_argument("--csv", help="write per-core packet counts here")
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("gen-traffic", help="generate a synthetic trace")
    g.add_argument("--out", required=True)
    g.add_argument("--dist", choices=("uniform", "zipf"), default="uniform")
    g.add_argument("--packets", type=int, default=50_000)
    g.add_argument("--flows", type=int, default=1_000)
    g.add_argument("--zipf-s", type=float, help="Zipf exponent (default: calibrated, top 48 flows carry 80%%)")
    g.add_argument("--churn", type=float, default=0.0, help="flow replacements per 1000 packets")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--reply-ratio", type=float, default=0.0)
    g.add_argument("--unsolicited", type=float, default=0.0)
    g.add_argument("--origin", default="lan")
    g.add_argument("--reply-iface", default="wan")
    g.add_argument("--gap", type=int, default=1, help="ticks between packets")
    g.add_argument("--format", choices=("text", "binary"), default="text")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_traffic)

    c = sub.add_parser("corpus-check", help="check every bundled NF against its expected outcome")
    c.add_argument("--dir", help="corpus directory (default: bundled)")
    c.add_argument("--profile", default="e810")
    c.add_argument("--packets", type=int, default=10_000)
    c.add_argument("--cores", default="1,4,16")
    c.add_argument("--samples", type=int, default=100_000)
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_corpus_check)

    r = sub.add_parser("rebalance", help="rebalance indirection tables for a trace")
    r.add_argument("--config", required=True)
    r.add_argument("--trace", required=True)
    r.add_argument("--cores", type=int, default=16)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rebalance)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ModelError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except NoAcceptableKey as e:
        print(f"error: no acceptable key: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
