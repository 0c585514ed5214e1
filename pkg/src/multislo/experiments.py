"""Reproducible experiment drivers shared by ``scripts/`` and the acceptance tests.

Each driver returns plain rows (dicts) so callers can print, assert on, or
write them as CSV.  Worker counts and load grids are sized for a laptop: small
enough to run in seconds, large enough that the policies separate.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field

from .config import RunConfig, ScalerSection, WorkloadConfig, build_simulation
from .metrics import summarize
from .scaler import PROVISIONING_DELAYS
from .workload import Request, SloSpec

POLICIES = ("slo_aware", "round_robin")

BURSTY_PHASES = [[0, 15, 5], [15, 35, 60], [50, 70, 60], [85, 100, 5]]


@dataclass
class TrendSetup:
    model: str = "7B"
    mode: str = "collocated"
    workers: int = 2
    prefill_workers: int = 1
    decode_workers: int = 1
    per_task_count: int = 300
    kv_capacity: int = 16384
    qps_grid: list[float] = field(default_factory=lambda: [5.0, 40.0, 80.0, 120.0, 160.0])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    def config(self, qps: float, seed: int, policy: str) -> RunConfig:
        return RunConfig(
            model=self.model, mode=self.mode, dispatch_policy=policy, workers=self.workers,
            prefill_workers=self.prefill_workers, decode_workers=self.decode_workers, kv_capacity=self.kv_capacity,
            workload=WorkloadConfig(task_set="4task", qps=qps, per_task_count=self.per_task_count, seed=seed),
        )


COLLOCATED_TREND = TrendSetup()
PD_TREND = TrendSetup(mode="pd_disaggregated", qps_grid=[5.0, 20.0, 40.0, 60.0, 80.0])


def one_shot_violations(result) -> int:
    """Requests placed on a decode worker before their prefill finished."""
    bad = 0
    for r in result.requests:
        if r.decode_worker_id is None:
            continue
        if r.first_token is None or r.migration_start is None or r.migration_start < r.first_token:
            bad += 1
    for rec in result.log.of("migration_start"):
        r = next(q for q in result.requests if q.id == rec.request_id)
        if r.first_token is None or rec.time < r.first_token:
            bad += 1
    return bad


def trend(setup: TrendSetup, policies=POLICIES) -> list[dict]:
    rows = []
    for qps in setup.qps_grid:
        for seed in setup.seeds:
            for policy in policies:
                result = build_simulation(setup.config(qps, seed, policy)).run()
                s = summarize(result)
                rows.append({
                    "qps": qps, "seed": seed, "policy": policy, "attainment": s["attainment"],
                    "cost_units": s["cost_units"], "p99": s["p99_e2e_s"],
                    "one_shot": one_shot_violations(result) if setup.mode == "pd_disaggregated" else 0,
                })
    return rows


def mean_by(rows: list[dict], key: str = "attainment") -> dict[tuple[float, str], float]:
    groups: dict[tuple[float, str], list[float]] = {}
    for row in rows:
        groups.setdefault((row["qps"], row["policy"]), []).append(row[key])
    return {k: statistics.fmean(v) for k, v in groups.items()}


def pre_collapse_qps(means: dict[tuple[float, str], float], floor: float = 0.5) -> float | None:
    """Highest grid QPS at which the SLO-aware policy still meets ``floor`` mean attainment."""
    ok = [qps for (qps, policy), att in means.items() if policy == "slo_aware" and att >= floor]
    return max(ok) if ok else None


# -- decode budget safety ------------------------------------------------------------------------

def budget_safety(seed: int, model: str = "70B", workers: int = 2, qps: float = 200.0,
                  kv_capacity: int = 65536, policy: str = "slo_aware") -> dict:
    """Run a saturated collocated workload and check every decode step against its batch's tightest TPOT."""
    cfg = RunConfig(
        model=model, workers=workers, kv_capacity=kv_capacity, dispatch_policy=policy,
        workload=WorkloadConfig(task_set="4task", qps=qps, per_task_count=300, seed=seed),
    )
    sim = build_simulation(cfg)
    steps = {"n": 0, "violations": 0, "worst_ratio": 0.0}

    def check(worker, kind, batch, duration, now):
        if kind != "decode":
            return
        tightest = min(r.sched_slo.tpot for r in batch)
        steps["n"] += 1
        steps["worst_ratio"] = max(steps["worst_ratio"], duration / tightest)
        if duration > tightest:
            steps["violations"] += 1

    sim.step_observers.append(check)
    sim.run()
    return {"seed": seed, "policy": policy, "decode_steps": steps["n"], "violations": steps["violations"],
            "worst_ratio": steps["worst_ratio"]}


# -- priority ramp -------------------------------------------------------------------------------

def priority_ramp(seed: int, policy: str, workers: int = 2, model: str = "7B",
                  rate_per_client: float = 15.0, stagger_s: float = 20.0, end_s: float = 90.0) -> dict:
    """Clients join lowest priority first; report per-priority median TTFT once all four are active."""
    cfg = RunConfig(
        model=model, workers=workers, dispatch_policy=policy,
        workload=WorkloadConfig(
            task_set="4task", priority_mode=True, seed=seed,
            ramp={"rate_per_client": rate_per_client, "stagger_s": stagger_s, "end_s": end_s},
        ),
    )
    result = build_simulation(cfg).run()
    n = 4
    window_start = (n - 1) * stagger_s
    window = [r for r in result.requests if window_start <= r.arrival_time < end_s]
    row = {"seed": seed, "policy": policy, "window_start_s": window_start}
    for p in range(n):
        mine = [r for r in window if r.priority == p]
        row[f"p{p}_median_ttft"] = statistics.median(r.ttft for r in mine) if mine else None
        row[f"p{p}_ttft_violation_rate"] = (sum(r.ttft > r.slo.ttft for r in mine) / len(mine)) if mine else None
    return row


# -- scaling -------------------------------------------------------------------------------------

def scaling_benefit(seed: int, min_workers: int = 2, max_workers: int = 4, model: str = "7B",
                    phases=None) -> dict:
    """Static minimum, static maximum and autoscaled runs on the same bursty trace."""
    phases = phases or BURSTY_PHASES
    out = {"seed": seed}
    for name, workers, scaled in (("min", min_workers, False), ("max", max_workers, False), ("scaled", min_workers, True)):
        cfg = RunConfig(
            model=model, workers=workers,
            workload=WorkloadConfig(task_set="4task", seed=seed, phases=phases),
            scaler=ScalerSection(enabled=scaled, min_workers=min_workers, max_workers=max_workers),
        )
        sim = build_simulation(cfg)
        result = sim.run()
        s = summarize(result)
        out[f"{name}_attainment"] = s["attainment"]
        out[f"{name}_cost_units"] = s["cost_units"]
        if scaled:
            out["lost"] = len(result.incomplete)
            out["scale_out"] = len(result.log.of("scale_out"))
            out["scale_in"] = len(result.log.of("drain_start"))
            drained = {rec.worker_id for rec in result.log.of("drain_start")}
            # Every request admitted to a drained worker must still have completed.
            out["lost_on_drained"] = sum(
                1 for r in result.requests if r.worker_id in drained and r.completion is None
            )
    return out


# -- provisioning --------------------------------------------------------------------------------

def provisioning_delay(model: str, mode: str) -> dict:
    """Force one scale-out and read its time-to-ready back from the event log."""
    # A burst that overloads the single worker, then one late request that keeps the run alive past ready time.
    trace = [Request(i, "burst", 0.0, 512, 4, slo=SloSpec(0.001, 1.0)) for i in range(40)]
    trace.append(Request(len(trace), "tail", 60.0, 4, 1, slo=SloSpec(1.0, 1.0)))
    cfg = RunConfig(
        model=model, workers=1,
        scaler=ScalerSection(enabled=True, min_workers=1, max_workers=2, provisioning_mode=mode, tau_s=0.5),
    )
    result = build_simulation(cfg, trace).run()
    out_rec = result.log.of("scale_out")[0]
    ready_rec = next(r for r in result.log.of("worker_ready") if r.worker_id == out_rec.worker_id)
    return {
        "model": model, "mode": mode, "configured_s": PROVISIONING_DELAYS[mode][model],
        "logged_delay_s": float(out_rec.detail.split(";")[0].split("=")[1]),
        "measured_s": ready_rec.time - out_rec.time,
    }


def provisioning_table(models=("7B", "32B", "70B"), modes=("fast", "cpu_offload", "disk")) -> list[dict]:
    return [provisioning_delay(m, mode) for m in models for mode in modes]
