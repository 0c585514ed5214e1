"""Threshold autoscaling with warm-pool provisioning and prefill/decode role flips.

Every ``tau_s`` the scaler computes a load metric and takes at most one
action: scale out when it exceeds ``eps_out``, scale in after it has stayed
below ``eps_in`` for ``scale_in_patience`` consecutive ticks.  In disaggregated
mode a persistent imbalance between the two pools flips one worker across.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Sequence

from .engine import Role, Simulator, Status, Worker

RATE_EPS = 1e-9

# Seconds from scale-out decision to a serving worker, by loading mode and model.
PROVISIONING_DELAYS: dict[str, dict[str, float]] = {
    "fast": {"7B": 0.89, "32B": 2.05, "70B": 1.16},
    "cpu_offload": {"7B": 2.73, "32B": 19.41, "70B": 11.50},
    "disk": {"7B": 4.14, "32B": 28.84, "70B": 22.58},
}


@dataclass
class ScalerConfig:
    tau_s: float = 1.0
    eps_out: float = 1.2
    eps_in: float = 0.5
    min_workers: int = 1
    max_workers: int = 4
    scale_in_patience: int = 3
    provisioning_mode: str = "fast"
    model: str = "7B"
    provisioning_delays: dict = field(default_factory=lambda: {m: dict(d) for m, d in PROVISIONING_DELAYS.items()})
    fast_failure_prob: float = 0.0
    rate_window_s: float = 3.0
    role_divergence: float = 2.0
    role_patience: int = 2

    def __post_init__(self):
        if not self.tau_s > 0:
            raise ValueError("tau_s must be > 0")
        if not self.eps_in < self.eps_out:
            raise ValueError("eps_in must be < eps_out")
        if not 1 <= self.min_workers <= self.max_workers:
            raise ValueError("need 1 <= min_workers <= max_workers")
        if self.provisioning_mode not in self.provisioning_delays:
            raise ValueError(f"unknown provisioning_mode {self.provisioning_mode!r}")
        if self.model not in self.provisioning_delays[self.provisioning_mode]:
            raise ValueError(f"no {self.provisioning_mode} provisioning delay for model {self.model!r}")
        if not 0 <= self.fast_failure_prob <= 1:
            raise ValueError("fast_failure_prob must be in [0, 1]")

    def delay(self, mode: str | None = None) -> float:
        return self.provisioning_delays[mode or self.provisioning_mode][self.model]


def load_metric(utils: Sequence[float], wait_ratios: Sequence[float], r_in: float, r_process: float) -> float:
    """max(mean utilization, worst wait/SLO ratio, arrival rate / processing rate)."""
    mean_util = sum(utils) / len(utils) if utils else 0.0
    worst_wait = max(wait_ratios, default=0.0)
    return max(mean_util, worst_wait, r_in / max(r_process, RATE_EPS))


class WarmPool:
    """Worker slots with the runtime up but no weights; stopped workers return here."""

    def __init__(self, sim: Simulator):
        self.sim = sim

    @property
    def capacity(self) -> int:
        return len(self.sim.workers)

    def available(self) -> list[Worker]:
        return [w for w in self.sim.workers.values() if w.status in (Status.WARM, Status.STOPPED)]


@dataclass
class ScaleAction:
    time: float
    kind: str  # scale_out, scale_in, role_flip, dropped
    worker_id: int | None
    metric: float
    detail: str = ""


class Scaler:
    def __init__(self, config: ScalerConfig | None = None):
        self.config = config or ScalerConfig()
        self.sim: Simulator | None = None
        self.warm: WarmPool | None = None
        self.below = 0
        self.diverged = 0
        self.history: list[tuple[float, float]] = []
        self.actions: list[ScaleAction] = []

    def attach(self, sim: Simulator) -> None:
        self.sim = sim
        self.warm = WarmPool(sim)

    # -- measurements
    def _rate(self, times: list[float], now: float) -> float:
        window = min(self.config.rate_window_s, now) or self.config.rate_window_s
        lo = bisect.bisect_right(times, now - window)
        return (len(times) - lo) / window

    def committed(self, role: Role | None = None) -> list[Worker]:
        """Workers that are serving or about to: running (not draining) or loading."""
        out = []
        for w in self.sim.workers.values():
            if w.status in (Status.RUNNING, Status.LOADING):
                eventual = w.pending_role or w.role
                if role is None or eventual is role:
                    out.append(w)
        return out

    def role_metric(self, role: Role, now: float) -> float:
        sim = self.sim
        workers = sim.pool(role)
        utils = [w.kv_used / w.kv_capacity for w in workers]
        if role is Role.DECODE:
            pending = sim.migrator.pending() if sim.migrator is not None else []
            waits = [(now - r.first_token) / r.sched_slo.tpot for r in pending]
            r_in = self._rate(sim.processed_times, now)
            r_out = self._rate(sim.handoff_times, now)
        else:
            waits = [(now - r.arrival_time) / r.sched_slo.ttft for r in sim.dispatcher.pending()]
            r_in = self._rate(sim.arrivals_times, now)
            r_out = self._rate(sim.processed_times, now)
        if not workers and (waits or r_in > 0):
            return math.inf
        return load_metric(utils, waits, r_in, r_out)

    def metrics(self, now: float) -> dict[Role, float]:
        if self.sim.disaggregated:
            return {Role.PREFILL: self.role_metric(Role.PREFILL, now), Role.DECODE: self.role_metric(Role.DECODE, now)}
        return {Role.COLLOCATED: self.role_metric(Role.COLLOCATED, now)}

    # -- decisions
    def on_tick(self, now: float) -> ScaleAction | None:
        cfg = self.config
        per_role = self.metrics(now)
        metric = max(per_role.values())
        self.history.append((now, metric))
        n = len(self.committed())
        action = None
        if metric > cfg.eps_out:
            self.below = 0
            if n < cfg.max_workers:
                action = self.scale_out(now, metric)
            else:
                action = ScaleAction(now, "dropped", None, metric, "max_workers")
                self.sim.record("scale_dropped", detail=f"metric={metric!r};reason=max_workers")
        elif metric < cfg.eps_in:
            self.below += 1
            if self.below >= cfg.scale_in_patience and n > cfg.min_workers:
                action = self.scale_in(now, metric)
        else:
            self.below = 0
        if self.sim.disaggregated:
            flip = self._divergence(per_role)
            if action is None or action.kind == "dropped":
                if flip is not None:
                    action = self.reassign_role(flip, now, metric) or action
        if action is not None:
            self.actions.append(action)
        return action

    def _divergence(self, per_role: dict[Role, float]) -> tuple[Role, Role] | None:
        p, d = per_role[Role.PREFILL], per_role[Role.DECODE]
        hot, cold = (Role.PREFILL, Role.DECODE) if p >= d else (Role.DECODE, Role.PREFILL)
        h, c = max(p, d), min(p, d)
        if h > 1.0 and h >= self.config.role_divergence * c:
            self.diverged += 1
        else:
            self.diverged = 0
        if self.diverged >= self.config.role_patience:
            return cold, hot
        return None

    def scale_out(self, now: float, metric: float) -> ScaleAction:
        slots = sorted(self.warm.available(), key=lambda w: w.id)
        if not slots:
            self.sim.record("scale_dropped", detail=f"metric={metric!r};reason=warm_pool_empty")
            return ScaleAction(now, "dropped", None, metric, "warm_pool_empty")
        w = slots[0]
        mode = self.config.provisioning_mode
        detail = f"mode={mode}"
        if mode == "fast" and self.config.fast_failure_prob > 0 and self.sim.rng.random() < self.config.fast_failure_prob:
            mode = "disk"
            detail = "mode=fast;fallback=disk"
        delay = self.config.delay(mode)
        role = Role.COLLOCATED if not self.sim.disaggregated else self.hotter_role(now)
        self.sim.provision(w, delay, role, detail)
        self.below = 0
        return ScaleAction(now, "scale_out", w.id, metric, detail)

    def scale_in(self, now: float, metric: float) -> ScaleAction | None:
        candidates = self.committed()
        if self.sim.disaggregated:
            # Keep at least one worker in each role.
            by_role = {r: [w for w in candidates if (w.pending_role or w.role) is r] for r in (Role.PREFILL, Role.DECODE)}
            candidates = [w for ws in by_role.values() if len(ws) > 1 for w in ws]
        candidates = [w for w in candidates if w.status is Status.RUNNING]
        if not candidates:
            return None
        w = min(candidates, key=lambda w: (w.kv_used, -w.id))
        self.sim.begin_drain(w)
        self.below = 0
        return ScaleAction(now, "scale_in", w.id, metric)

    def reassign_role(self, flip: tuple[Role, Role], now: float, metric: float) -> ScaleAction | None:
        cold, hot = flip
        donors = [w for w in self.sim.pool(cold)]
        if len(self.committed(cold)) <= 1 or not donors:
            return None
        w = min(donors, key=lambda w: (w.kv_used, -w.id))
        self.sim.begin_drain(w, new_role=hot)
        self.diverged = 0
        return ScaleAction(now, "role_flip", w.id, metric, f"{cold.value}->{hot.value}")

    def hotter_role(self, now: float) -> Role:
        per_role = self.metrics(now)
        return Role.PREFILL if per_role[Role.PREFILL] >= per_role[Role.DECODE] else Role.DECODE

    def role_for_ready(self, w: Worker) -> Role:
        if not self.sim.disaggregated:
            return Role.COLLOCATED
        return self.hotter_role(self.sim.now)
