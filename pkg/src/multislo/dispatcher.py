"""Prefill-stage dispatching: the SLO-aware dispatcher and the round-robin baseline.

The SLO-aware dispatcher keeps pending requests ordered by (TPOT, arrival, id)
and workers ordered by maturity time.  Each round pops the earliest-maturity
worker, computes its token limit (KV headroom and the SLO token budget), admits
requests first-fit in queue order when their TTFT feasibility probability
clears ``theta``, and pushes the worker back with a new maturity time.
"""

from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

from .engine import Role, ShadowEntry, Simulator, Worker, WorkerView
from .latency import LatencyModel, predict_decode_step, predict_prefill
from .workload import Request, SloSpec

# Relative guard for floor() against representation error, e.g. 549.9999999999999 for 550.
_FLOOR_EPS = 1e-9


@dataclass(frozen=True)
class DispatcherConfig:
    theta: float = 0.5
    util_weight: float = 0.5
    poll_interval_s: float = 0.01
    max_token_budget: int = 1 << 30
    output_ema_alpha: float = 0.1

    def __post_init__(self):
        if not 0 <= self.theta <= 1:
            raise ValueError("theta must be in [0, 1]")
        if self.poll_interval_s <= 0:
            raise ValueError("poll_interval_s must be > 0")


@dataclass
class DispatchDecision:
    worker_id: int
    admitted: list[Request]
    token_limit: int
    maturity: float


class RequestQueue:
    """Pending requests ordered by (TPOT, arrival time, id)."""

    def __init__(self, key: Callable[[Request], tuple] | None = None):
        self._key = key or (lambda r: (r.sched_slo.tpot, r.arrival_time, r.id))
        self._keys: list[tuple] = []
        self._items: list[Request] = []
        self._ids: set[int] = set()

    def push(self, r: Request) -> None:
        if r.id in self._ids:
            raise ValueError(f"request {r.id} already queued")
        k = self._key(r)
        i = bisect.bisect_right(self._keys, k)
        self._keys.insert(i, k)
        self._items.insert(i, r)
        self._ids.add(r.id)

    def remove(self, r: Request) -> None:
        k = self._key(r)
        i = bisect.bisect_left(self._keys, k)
        while self._items[i] is not r:
            i += 1
        del self._keys[i], self._items[i]
        self._ids.discard(r.id)

    def pop(self) -> Request:
        self._keys.pop(0)
        r = self._items.pop(0)
        self._ids.discard(r.id)
        return r

    def __iter__(self) -> Iterator[Request]:
        return iter(list(self._items))

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, r: Request) -> bool:
        return r.id in self._ids


class WorkerQueue:
    """Worker ids keyed by maturity time; ties go to the lower id."""

    def __init__(self):
        self._maturity: dict[int, float] = {}

    def push(self, worker_id: int, maturity: float) -> None:
        self._maturity[worker_id] = maturity

    def peek(self) -> tuple[int, float] | None:
        if not self._maturity:
            return None
        wid = min(self._maturity, key=lambda w: (self._maturity[w], w))
        return wid, self._maturity[wid]

    def pop(self) -> tuple[int, float]:
        top = self.peek()
        if top is None:
            raise IndexError("pop from empty WorkerQueue")
        del self._maturity[top[0]]
        return top

    def discard(self, worker_id: int) -> None:
        self._maturity.pop(worker_id, None)

    def maturity(self, worker_id: int) -> float | None:
        return self._maturity.get(worker_id)

    def __len__(self) -> int:
        return len(self._maturity)

    def __contains__(self, worker_id: int) -> bool:
        return worker_id in self._maturity


class OutputEstimator:
    """Per-task exponential moving average of observed output lengths."""

    def __init__(self, priors: dict[str, float], alpha: float = 0.1, default: float = 128.0):
        self.values = dict(priors)
        self.alpha = alpha
        self.default = default
        self.version = 0  # bumped on every update so callers can cache derived totals
        self._ceil = {k: math.ceil(v) for k, v in self.values.items()}

    def get(self, task: str) -> float:
        return self.values.get(task, self.default)

    def tokens(self, task: str) -> int:
        """Estimate rounded up to whole tokens."""
        n = self._ceil.get(task)
        return math.ceil(self.default) if n is None else n

    def observe(self, task: str, output_len: int) -> None:
        self.values[task] = (1 - self.alpha) * self.get(task) + self.alpha * output_len
        self._ceil[task] = math.ceil(self.values[task])
        self.version += 1

    def remaining(self, r: Request, generated: int) -> int:
        return max(self.tokens(r.task) - generated, 0)


def compute_ntoken(tightest: SloSpec, e_d: float, model: LatencyModel, max_budget: int = 1 << 30) -> int:
    """Token budget bounding new prefill tokens so the tightest TTFT/TPOT pair stays feasible."""
    ttft, tpot = tightest.ttft, tightest.tpot
    if tpot <= e_d:
        return 0
    if math.isinf(ttft):
        return max_budget
    numerator = ttft * tpot - ttft * e_d - model.a * tpot
    if numerator <= 0:
        return 0
    if model.b == 0:
        return max_budget
    budget = numerator / (model.b * tpot)
    return min(max_budget, math.floor(budget + _FLOOR_EPS * max(1.0, budget)))


def feasibility_probability(t_remaining: float, ttft: float, utilization: float, util_weight: float) -> float:
    """Slack fraction discounted by worker utilization, in [0, 1]."""
    if t_remaining <= 0:
        return 0.0
    slack = min(max(t_remaining / ttft, 0.0), 1.0)
    return slack * min(max(1.0 - util_weight * utilization, 0.0), 1.0)


def maturity_time(now: float, e_p: float, e_d: float, min_tpot: float) -> float:
    """Next time the worker should be offered work: one prefill plus the decode steps that amortize it."""
    relax = min_tpot - e_d
    if relax <= 0:
        return now + e_p
    return now + e_p + (e_p / relax) * e_d


def select_admissions(
    candidates: Iterable[Request],
    token_limit: float,
    probability: Callable[[Request], float],
    theta: float,
    fits: Callable[[list[Request], Request], bool] | None = None,
    tokens_used: int = 0,
) -> list[Request]:
    """Single-pass first-fit scan: admit while the cumulative input tokens stay below ``token_limit``."""
    admitted: list[Request] = []
    total = tokens_used
    for r in candidates:
        if probability(r) < theta:
            continue
        if total + r.input_len >= token_limit:
            continue
        if fits is not None and not fits(admitted, r):
            continue
        admitted.append(r)
        total += r.input_len
    return admitted


class SloAwareDispatcher:
    name = "slo_aware"

    def __init__(self, config: DispatcherConfig | None = None, output_priors: dict[str, float] | None = None):
        self.config = config or DispatcherConfig()
        self.queue = RequestQueue()
        self.late = RequestQueue()
        self.workers = WorkerQueue()
        self.outputs = OutputEstimator(output_priors or {}, self.config.output_ema_alpha)
        self.sim: Simulator | None = None
        self.decisions: list[DispatchDecision] = []
        self.keep_decisions = False

    # -- wiring
    def attach(self, sim: Simulator) -> None:
        self.sim = sim
        for w in sim.pool():
            if w.role in (Role.COLLOCATED, Role.PREFILL):
                self.workers.push(w.id, 0.0)

    @property
    def model(self) -> LatencyModel:
        return self.sim.estimate

    def pending(self) -> list[Request]:
        return list(self.queue) + list(self.late)

    def on_arrival(self, r: Request, now: float) -> None:
        self.queue.push(r)
        self._schedule_wake(now)

    def on_worker_added(self, w: Worker, now: float) -> None:
        self.workers.push(w.id, now)
        self._schedule_wake(now)

    def on_worker_removed(self, w: Worker) -> None:
        self.workers.discard(w.id)

    def on_progress(self, now: float) -> None:
        self._schedule_wake(now)

    def observe_completion(self, r: Request) -> None:
        self.outputs.observe(r.task, r.output_len)

    def _schedule_wake(self, now: float) -> None:
        if not (len(self.queue) or len(self.late)):
            return
        top = self.workers.peek()
        if top is not None:
            self.sim.request_wake(max(now, top[1]))

    def on_wake(self, now: float) -> None:
        while len(self.queue) or len(self.late):
            top = self.workers.peek()
            if top is None or top[1] > now:
                break
            wid, _ = self.workers.pop()
            decision = self.dispatch_round(now, self.sim.workers[wid])
            self.workers.push(wid, decision.maturity)
            if self.keep_decisions:
                self.decisions.append(decision)
        self._schedule_wake(now)

    # -- per-worker quantities
    def expected_prefill(self, r: Request) -> float:
        return predict_prefill(self.model, [r.input_len])

    def calculate_p(self, r: Request, view: WorkerView, now: float) -> float:
        t_remaining = (r.arrival_time + r.sched_slo.ttft) - (now + self.expected_prefill(r))
        return feasibility_probability(t_remaining, r.sched_slo.ttft, view.utilization(), self.config.util_weight)

    def _slack_fraction(self, r: Request, now: float) -> float:
        t_remaining = (r.arrival_time + r.sched_slo.ttft) - (now + self.expected_prefill(r))
        return t_remaining / r.sched_slo.ttft

    def _decodes_here(self, view: WorkerView) -> bool:
        return view.role is not Role.PREFILL

    def reserve(self, e: ShadowEntry, decodes: bool) -> int:
        r = e.request
        tokens = 0 if e.kv_counted else r.input_len + max(e.generated - 1, 0)
        if decodes and not e.held:
            tokens += self.outputs.remaining(r, max(e.generated, 1))
        return tokens

    def free_token(self, view: WorkerView) -> int:
        decodes = self._decodes_here(view)
        reserved = sum(self.reserve(e, decodes) for e in view.entries.values())
        return view.kv_capacity - view.kv_used - reserved

    def _projected_len(self, r: Request, generated: int) -> int:
        return r.input_len + max(self.outputs.tokens(r.task), generated + 1)

    def decode_fits(self, view: WorkerView, now: float, extra: Sequence[Request]) -> bool:
        """Projected peak decode step over residents plus ``extra`` stays within their tightest TPOT."""
        if not self._decodes_here(view):
            return True
        lengths, tpot = [], math.inf
        for e in view.entries.values():
            if e.held:
                continue
            lengths.append(self._projected_len(e.request, e.generated))
            tpot = min(tpot, e.request.sched_slo.tpot)
        for r in extra:
            lengths.append(self._projected_len(r, 0))
            tpot = min(tpot, r.sched_slo.tpot)
        if not lengths:
            return True
        return predict_decode_step(self.model, lengths) <= tpot

    def tightest(self, view: WorkerView, pending: Iterable[Request]) -> SloSpec | None:
        """Tightest targets among residents and ``pending``; late requests only constrain TPOT."""
        ttft = tpot = math.inf
        for r in itertools.chain((e.request for e in view.entries.values()), pending):
            tpot = min(tpot, r.sched_slo.tpot)
            if not r.late:
                ttft = min(ttft, r.sched_slo.ttft)
        if math.isinf(tpot):
            return None
        return SloSpec(ttft, tpot)

    def ongoing_decode_estimate(self, view: WorkerView) -> float:
        if not self._decodes_here(view):
            return 0.0
        lengths = [e.request.input_len + max(e.generated, 1) for e in view.entries.values() if not e.held]
        return predict_decode_step(self.model, lengths) if lengths else 0.0

    def token_limit(self, view: WorkerView, pending: Sequence[Request]) -> int:
        tight = self.tightest(view, pending)
        if tight is None:
            return 0
        ntoken = compute_ntoken(tight, self.ongoing_decode_estimate(view), self.model, self.config.max_token_budget)
        return min(self.free_token(view), ntoken)

    # -- the round
    def dispatch_round(self, now: float, worker: Worker) -> DispatchDecision:
        view = self.sim.monitor.view(worker.id)
        theta = self.config.theta

        for r in self.queue:
            if self._slack_fraction(r, now) < theta:
                # p <= slack fraction on every worker from now on: never feasible again.
                self.queue.remove(r)
                r.late = True
                self.late.push(r)

        pending = list(self.queue)
        limit = self.token_limit(view, pending)

        def fits(admitted: list[Request], r: Request) -> bool:
            return self.decode_fits(view, now, admitted + [r])

        admitted = select_admissions(pending, limit, lambda r: self.calculate_p(r, view, now), theta, fits)
        if len(admitted) == len(pending) and len(self.late):
            # Best effort for requests whose first-token deadline is already lost.
            late = list(self.late)
            used = sum(r.input_len for r in admitted)
            late_limit = self.token_limit(view, pending + late)
            extra = select_admissions(
                late, late_limit, lambda r: 1.0, theta, lambda adm, r: fits(admitted + adm, r), tokens_used=used
            )
            for r in extra:
                self.late.remove(r)
            admitted += extra
        for r in admitted:
            if r in self.queue:
                self.queue.remove(r)

        maturity = self.update_maturity(worker, view, admitted, now)
        if admitted:
            self.sim.deliver(admitted, worker, admitted_by=self.name)
        return DispatchDecision(worker.id, admitted, limit, maturity)

    def update_maturity(self, worker: Worker, view: WorkerView, admitted: list[Request], now: float) -> float:
        waiting = view.waiting(now) + admitted
        start = max(now, view.busy_until)
        if waiting:
            e_p = predict_prefill(self.model, [r.input_len for r in waiting])
            ready = start + e_p
            for r in admitted:
                view.entries[r.id] = ShadowEntry(r, 0, ready)
            for r in view.waiting(now):
                view.entries[r.id].ready_at = ready
            view.busy_until = ready
        else:
            e_p = 0.0
        decodes = self._decodes_here(view)
        members = [e for e in view.entries.values() if not e.held]
        if decodes and members:
            e_d = predict_decode_step(self.model, [e.request.input_len + max(e.generated, 1) for e in members])
            min_tpot = min(e.request.sched_slo.tpot for e in members)
        else:
            e_d, min_tpot = 0.0, math.inf
        if worker.role is Role.PREFILL:
            maturity = start + e_p
        else:
            maturity = maturity_time(now, e_p, e_d, min_tpot)
        if maturity <= now:
            maturity = now + self.config.poll_interval_s
        return maturity


class RoundRobinDispatcher:
    """Assigns each arriving request to the next worker in strict rotation, subject only to KV room."""

    name = "round_robin"

    def __init__(self):
        self.queue: list[Request] = []
        self.sim: Simulator | None = None
        self._last: int = -1
        self.assignments: list[int] = []

    def attach(self, sim: Simulator) -> None:
        self.sim = sim

    def pending(self) -> list[Request]:
        return list(self.queue)

    def on_arrival(self, r: Request, now: float) -> None:
        self.queue.append(r)
        self._assign()

    def on_wake(self, now: float) -> None:
        self._assign()

    def on_progress(self, now: float) -> None:
        if self.queue:
            self._assign()

    def on_worker_added(self, w: Worker, now: float) -> None:
        self._assign()

    def on_worker_removed(self, w: Worker) -> None:
        pass

    @staticmethod
    def has_room(w: Worker, r: Request) -> bool:
        committed = w.kv_used + sum(q.input_len for q in w.waiting) + sum(q.input_len for q in w.step_batch if q.first_token is None)
        return committed + r.input_len <= w.kv_capacity

    def _rotation(self) -> list[Worker]:
        pool = sorted(
            (w for w in self.sim.pool() if w.role in (Role.COLLOCATED, Role.PREFILL)), key=lambda w: w.id
        )
        after = [w for w in pool if w.id > self._last]
        return after + [w for w in pool if w.id <= self._last]

    def _assign(self) -> None:
        while self.queue:
            r = self.queue[0]
            target = next((w for w in self._rotation() if self.has_room(w, r)), None)
            if target is None:
                return
            self.queue.pop(0)
            self._last = target.id
            self.assignments.append(target.id)
            self.sim.deliver([r], target, admitted_by=self.name)
