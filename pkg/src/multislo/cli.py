"""Command-line entry point: ``multislo {run,sweep,fit,compare,trace,synth-profile}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, RunConfig, build_simulation, build_trace, load_config, output_dir
from .engine import SimulationStall
from .latency import MODEL_PROFILES, FitUnderdetermined, fit, read_samples, save_model, synthesize_samples, write_samples
from .metrics import compare_summaries, summarize, write_results, write_summary
from .workload import write_trace

log = logging.getLogger("multislo")

EXIT_OK, EXIT_CONFIG, EXIT_STALL = 0, 2, 3

SWEEP_HEADER = ("qps", "seed", "policy", "attainment", "cost_units", "p50", "p95", "p99")
AGG_METRICS = ("attainment", "cost_units", "p50", "p95", "p99")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    cfg = cfg.with_overrides(
        seed=getattr(args, "seed", None), policy=getattr(args, "policy", None),
        mode=getattr(args, "mode", None), qps=getattr(args, "qps", None),
    )
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    out = output_dir(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = build_simulation(cfg)
    try:
        result = sim.run()
    except SimulationStall as exc:
        sim.log.write_csv(out / "events.csv")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STALL
    result.log.write_csv(out / "events.csv")
    write_results(out / "requests.csv", result.requests)
    summary = summarize(result)
    write_summary(out / "summary.json", summary)
    print(f"attainment={summary['attainment']} cost_units={summary['cost_units']} -> {out}")
    if result.incomplete:
        print(f"error: deadline reached with {len(result.incomplete)} unfinished requests", file=sys.stderr)
        return EXIT_STALL
    return EXIT_OK


def sweep_cell(cfg: RunConfig, qps: float, seed: int, policy: str) -> dict:
    cell = cfg.with_overrides(qps=qps, seed=seed, policy=policy)
    result = build_simulation(cell).run()
    s = summarize(result)
    return {
        "qps": qps, "seed": seed, "policy": policy, "attainment": s["attainment"], "cost_units": s["cost_units"],
        "p50": s["p50_e2e_s"], "p95": s["p95_e2e_s"], "p99": s["p99_e2e_s"],
    }


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and sample std per (qps, policy), in first-seen order."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["qps"], row["policy"]), []).append(row)
    out = []
    for (qps, policy), members in groups.items():
        agg = {"qps": qps, "policy": policy, "n": len(members)}
        for m in AGG_METRICS:
            values = [float(r[m]) for r in members if r[m] is not None]
            agg[f"{m}_mean"] = statistics.fmean(values) if values else None
            agg[f"{m}_std"] = statistics.stdev(values) if len(values) > 1 else 0.0
        out.append(agg)
    return out


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = output_dir(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = [(q, s, p) for q in _floats(args.qps_list) for s in _ints(args.seeds) for p in args.policies.split(",")]
    if not grid:
        raise ConfigError("sweep grid is empty", "<args>")
    rows: list[dict] = []
    status = EXIT_OK
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, SWEEP_HEADER, lineterminator="\n")
        writer.writeheader()
        pool = ProcessPoolExecutor(args.jobs) if args.jobs > 1 else None
        try:
            if pool is not None:
                futures = [pool.submit(sweep_cell, cfg, *cell) for cell in grid]
                results = (f.result() for f in futures)
            else:
                results = (sweep_cell(cfg, *cell) for cell in grid)
            for row in results:
                rows.append(row)
                writer.writerow(row)
                fh.flush()
        except (SimulationStall, ValueError) as exc:
            print(f"error: sweep aborted after {len(rows)} rows: {exc}", file=sys.stderr)
            status = EXIT_STALL
        finally:
            if pool is not None:
                pool.shutdown(cancel_futures=True)
    agg = aggregate(rows)
    if agg:
        with open(out / "sweep_agg.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, list(agg[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(agg)
    print(f"{len(rows)} rows, {len(agg)} aggregate rows -> {out}")
    return status


def cmd_fit(args) -> int:
    try:
        samples = read_samples(args.samples)
        result = fit(samples)
    except FitUnderdetermined as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, result)
    print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_compare(args) -> int:
    a = json.loads(Path(args.a).read_text())
    b = json.loads(Path(args.b).read_text())
    diffs = compare_summaries(a, b)
    for key, va, vb in diffs:
        delta = ""
        if isinstance(va, (int, float)) and isinstance(vb, (int, float)) and not isinstance(va, bool):
            delta = f"  ({vb - va:+.6g})"
        print(f"{key}: {va} -> {vb}{delta}")
    if not diffs:
        print("summaries are identical")
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = _load(args)
    trace = build_trace(cfg)
    write_trace(args.output, trace)
    print(f"{len(trace)} requests -> {args.output}")
    return EXIT_OK


def cmd_synth_profile(args) -> int:
    samples = synthesize_samples(MODEL_PROFILES[args.model], noise=args.noise, seed=args.seed)
    write_samples(args.output, samples)
    print(f"{len(samples)} samples -> {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multislo", description="Multi-SLO LLM serving simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def overrides(sp, qps=True):
        sp.add_argument("config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--policy", choices=("slo_aware", "round_robin"))
        sp.add_argument("--mode", choices=("collocated", "pd_disaggregated"))
        if qps:
            sp.add_argument("--qps", type=float)

    sp = sub.add_parser("run", help="simulate one configuration")
    overrides(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run a qps x seed x policy grid")
    overrides(sp, qps=False)
    sp.add_argument("--qps-list", required=True, help="comma-separated QPS values")
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--policies", default="slo_aware,round_robin")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("fit", help="fit a latency model to profile samples")
    sp.add_argument("samples")
    sp.add_argument("--out", default="model.json")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("compare", help="diff two summary JSON files")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("trace", help="write the configured workload as a trace CSV")
    overrides(sp)
    sp.add_argument("output")
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("synth-profile", help="write synthetic profile samples for a built-in model")
    sp.add_argument("--model", choices=sorted(MODEL_PROFILES), default="7B")
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("output")
    sp.set_defaults(func=cmd_synth_profile)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
