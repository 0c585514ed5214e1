"""Attainment, cost and latency reports over finished simulation runs."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

from .engine import RunResult, Worker
from .workload import Request

RESULTS_HEADER = ("id", "task", "arrival_s", "first_token_s", "completion_s", "ttft_s", "tpot_s", "ttft_met", "tpot_met")

COST_UNIT_S = 0.05


def slo_met(r: Request) -> tuple[bool, bool]:
    """(TTFT met, TPOT met); an unfinished request meets neither."""
    if r.completion is None or r.slo is None:
        return False, False
    return r.ttft <= r.slo.ttft, r.tpot <= r.slo.tpot


def attainment(requests: Sequence[Request]) -> float | None:
    if not requests:
        return None
    return sum(all(slo_met(r)) for r in requests) / len(requests)


def e2e_latency(r: Request) -> float | None:
    return None if r.completion is None else r.completion - r.arrival_time


def percentile(values: Sequence[float], q: float) -> float | None:
    """Nearest-rank percentile, ``q`` in (0, 100]."""
    if not values:
        return None
    if not 0 < q <= 100:
        raise ValueError("q must be in (0, 100]")
    ordered = sorted(values)
    rank = math.ceil(q / 100 * len(ordered))
    return ordered[max(rank, 1) - 1]


def worker_units(active_seconds: float) -> int:
    # The small guard keeps exact multiples (10 s -> 200) from rounding up on float noise.
    return math.ceil(active_seconds / COST_UNIT_S - 1e-9) if active_seconds > 0 else 0


def cost_seconds(workers: Iterable[Worker], unit_cost: float = 1.0) -> float:
    return sum(w.active_seconds() for w in sorted(workers, key=lambda w: w.id)) * unit_cost


def cost_units(workers: Iterable[Worker]) -> int:
    return sum(worker_units(w.active_seconds()) for w in workers)


def _latency_block(requests: Sequence[Request]) -> dict:
    e2e = [e2e_latency(r) for r in requests if r.completion is not None]
    ttfts = [r.ttft for r in requests if r.first_token is not None]
    met = [slo_met(r) for r in requests]
    return {
        "count": len(requests),
        "completed": len(e2e),
        "attainment": attainment(requests),
        "ttft_violation_rate": (sum(not m[0] for m in met) / len(met)) if met else None,
        "p50_ttft_s": percentile(ttfts, 50),
        "p50_e2e_s": percentile(e2e, 50),
        "p95_e2e_s": percentile(e2e, 95),
        "p99_e2e_s": percentile(e2e, 99),
    }


def summarize(result: RunResult) -> dict:
    reqs = result.requests
    violations = {"ttft_only": 0, "tpot_only": 0, "both": 0, "incomplete": 0}
    for r in reqs:
        if r.completion is None:
            violations["incomplete"] += 1
            continue
        ttft_ok, tpot_ok = slo_met(r)
        if not ttft_ok and not tpot_ok:
            violations["both"] += 1
        elif not ttft_ok:
            violations["ttft_only"] += 1
        elif not tpot_ok:
            violations["tpot_only"] += 1
    by_task: dict[str, list[Request]] = defaultdict(list)
    by_priority: dict[str, list[Request]] = defaultdict(list)
    for r in reqs:
        by_task[r.task].append(r)
        if r.priority is not None:
            by_priority[f"P{r.priority}"].append(r)
    overall = _latency_block(reqs)
    out = {
        "requests": len(reqs),
        "completed": overall["completed"],
        "attainment": overall["attainment"],
        "cost_seconds": cost_seconds(result.workers),
        "cost_units": cost_units(result.workers),
        "p50_e2e_s": overall["p50_e2e_s"],
        "p95_e2e_s": overall["p95_e2e_s"],
        "p99_e2e_s": overall["p99_e2e_s"],
        "end_time_s": result.end_time,
        "deadline_hit": result.deadline_hit,
        "violations": violations,
        "per_task": {k: _latency_block(v) for k, v in sorted(by_task.items())},
    }
    if by_priority:
        out["per_priority"] = {k: _latency_block(v) for k, v in sorted(by_priority.items())}
    return out


def _fmt(x) -> str:
    return "" if x is None else repr(x)


def write_results(path: str | Path, requests: Iterable[Request]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULTS_HEADER)
        for r in requests:
            ttft_ok, tpot_ok = slo_met(r)
            writer.writerow([
                r.id, r.task, repr(r.arrival_time), _fmt(r.first_token), _fmt(r.completion),
                _fmt(r.ttft), _fmt(r.tpot), int(ttft_ok), int(tpot_ok),
            ])


def write_summary(path: str | Path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def compare_summaries(a: dict, b: dict, prefix: str = "") -> list[tuple[str, object, object]]:
    """Flattened (key, a, b) for every scalar that differs between two summaries."""
    diffs = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        name = f"{prefix}{key}"
        if isinstance(va, dict) and isinstance(vb, dict):
            diffs.extend(compare_summaries(va, vb, name + "."))
        elif va != vb:
            diffs.append((name, va, vb))
    return diffs
