"""Deterministic discrete-event core.

Workers are modeled analytically: a prefill step takes ``predict_prefill`` of
the oracle model over the batch and is non-interruptible; a decode step takes
``predict_decode_step`` over the running batch and produces one token per
member.  Steps on one worker are serialized.  A collocated worker that has
dispatched-but-unprefilled requests runs a prefill step before its next decode
step.

Scheduling policies (dispatcher, migrator, scaler, priority mapper) are plain
objects driven by the event loop; see :mod:`multislo.dispatcher` and friends.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .latency import LatencyModel
from .workload import Request

log = logging.getLogger(__name__)

EVENT_LOG_HEADER = ("time_s", "event", "request_id", "worker_id", "detail")


class SimulationStall(RuntimeError):
    def __init__(self, now: float, stuck: Sequence[int]):
        self.now = now
        self.stuck = list(stuck)
        shown = ", ".join(str(i) for i in self.stuck[:20])
        more = "" if len(self.stuck) <= 20 else f" (+{len(self.stuck) - 20} more)"
        super().__init__(f"simulation stalled at t={now:.6f}s with {len(self.stuck)} unfinished requests: {shown}{more}")


class Role(str, Enum):
    COLLOCATED = "collocated"
    PREFILL = "prefill"
    DECODE = "decode"


class Status(str, Enum):
    WARM = "warm"
    LOADING = "loading"
    RUNNING = "running"
    DRAINING = "draining"
    STOPPED = "stopped"


class EventKind(str, Enum):
    ARRIVAL = "arrival"
    DISPATCH_WAKE = "dispatch_wake"
    DELIVER = "deliver"
    PREFILL_DONE = "prefill_done"
    DECODE_STEP_DONE = "decode_step_done"
    MIGRATION_DONE = "migration_done"
    MONITOR_TICK = "monitor_tick"
    SCALE_TICK = "scale_tick"
    WORKER_READY = "worker_ready"


PROGRESS_EVENTS = {
    EventKind.ARRIVAL, EventKind.PREFILL_DONE, EventKind.DECODE_STEP_DONE,
    EventKind.MIGRATION_DONE, EventKind.WORKER_READY, EventKind.DELIVER,
}


@dataclass(order=True)
class SimEvent:
    time: float
    sequence: int
    kind: EventKind = field(compare=False)
    payload: Any = field(compare=False, default=None)


@dataclass(frozen=True)
class KvLinkModel:
    base_latency: float = 0.005
    per_token: float = 1e-6

    def __post_init__(self):
        if self.base_latency < 0 or self.per_token < 0:
            raise ValueError("KV link latencies must be >= 0")

    def delay(self, tokens: int) -> float:
        return self.base_latency + self.per_token * tokens


@dataclass
class LogRecord:
    time: float
    event: str
    request_id: int | None = None
    worker_id: int | None = None
    detail: str = ""


class EventLog(list):
    """Ordered list of :class:`LogRecord` with CSV output."""

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(EVENT_LOG_HEADER)
            for rec in self:
                writer.writerow([
                    repr(rec.time), rec.event,
                    "" if rec.request_id is None else rec.request_id,
                    "" if rec.worker_id is None else rec.worker_id,
                    rec.detail,
                ])

    def of(self, event: str) -> list[LogRecord]:
        return [r for r in self if r.event == event]


def peak_kv(r: Request) -> int:
    return r.input_len + r.output_len - 1


@dataclass
class Worker:
    id: int
    role: Role
    kv_capacity: int
    status: Status = Status.RUNNING
    waiting: list[Request] = field(default_factory=list)
    running: list[Request] = field(default_factory=list)
    prefilled: list[Request] = field(default_factory=list)
    incoming: list[Request] = field(default_factory=list)
    kv_used: int = 0
    # Ground-truth peak KV of everything resident or admitted into a step; the
    # engine never starts work that could push kv_used past capacity.
    footprint: int = 0
    step_kind: str | None = None
    step_batch: list[Request] = field(default_factory=list)
    step_start: float = 0.0
    busy_until: float = 0.0
    spans: list[list[float]] = field(default_factory=list)
    pending_role: Role | None = None
    busy_time: float = 0.0

    @property
    def busy(self) -> bool:
        return self.step_kind is not None

    @property
    def active(self) -> bool:
        return self.status in (Status.LOADING, Status.RUNNING, Status.DRAINING)

    @property
    def accepting(self) -> bool:
        return self.status == Status.RUNNING and self.pending_role is None

    @property
    def empty(self) -> bool:
        return not (self.waiting or self.running or self.prefilled or self.incoming or self.step_batch)

    def residents(self) -> list[Request]:
        return self.waiting + self.running + self.prefilled + self.incoming

    def active_seconds(self, until: float | None = None) -> float:
        total = 0.0
        for start, end in self.spans:
            stop = end if end is not None else until
            if stop is not None:
                total += stop - start
        return total


@dataclass
class ShadowEntry:
    request: Request
    generated: int
    ready_at: float | None  # predicted first-token time while awaiting prefill
    kv_counted: bool = False  # KV already included in the view's kv_used
    held: bool = False  # prefilled on a prefill worker, awaiting migration


@dataclass
class WorkerView:
    """The schedulers' possibly stale picture of one worker."""

    id: int
    role: Role
    kv_capacity: int
    kv_used: int = 0
    busy_until: float = 0.0
    entries: dict[int, ShadowEntry] = field(default_factory=dict)

    def waiting(self, now: float) -> list[Request]:
        return [e.request for e in self.entries.values() if e.ready_at is not None and e.ready_at > now]

    def decoding(self, now: float) -> list[ShadowEntry]:
        return [e for e in self.entries.values() if not e.held and (e.ready_at is None or e.ready_at <= now)]

    def utilization(self) -> float:
        return min(self.kv_used / self.kv_capacity, 1.0) if self.kv_capacity else 1.0


class Monitor:
    """Instance-workload state shared by the dispatcher and the migrator.

    ``sync`` copies true worker state; between syncs the schedulers amend the
    views themselves as they dispatch or migrate.
    """

    def __init__(self, sim: "Simulator"):
        self.sim = sim
        self.views: dict[int, WorkerView] = {}

    def view(self, worker_id: int) -> WorkerView:
        if worker_id not in self.views:
            w = self.sim.workers[worker_id]
            self.views[worker_id] = WorkerView(w.id, w.role, w.kv_capacity)
            self.sync_worker(w)
        return self.views[worker_id]

    def sync(self) -> None:
        for w in self.sim.workers.values():
            if w.active:
                self.sync_worker(w)

    def sync_worker(self, w: Worker) -> None:
        est = self.sim.estimate
        now = self.sim.now
        v = self.views.get(w.id)
        if v is None:
            v = self.views[w.id] = WorkerView(w.id, w.role, w.kv_capacity)
        v.role = w.role
        v.kv_used = w.kv_used
        entries: dict[int, ShadowEntry] = {}
        busy_until = now
        if w.step_kind is not None:
            if w.step_kind == "prefill":
                predicted = w.step_start + est.predict_prefill([r.input_len for r in w.step_batch])
            else:
                predicted = w.step_start + est.predict_decode_step([r.current_len for r in w.step_batch])
            busy_until = max(now, predicted)
            if w.step_kind == "prefill":
                for r in w.step_batch:
                    entries[r.id] = ShadowEntry(r, r.generated, busy_until)
        if w.waiting:
            ready = busy_until + est.predict_prefill([r.input_len for r in w.waiting])
            for r in w.waiting:
                entries[r.id] = ShadowEntry(r, r.generated, ready)
        for r in w.running:
            entries[r.id] = ShadowEntry(r, r.generated, None, kv_counted=True)
        if w.step_kind == "decode":
            for r in w.step_batch:
                entries.setdefault(r.id, ShadowEntry(r, r.generated, None, kv_counted=True))
        for r in w.incoming:
            entries[r.id] = ShadowEntry(r, r.generated, None)
        for r in w.prefilled:
            entries[r.id] = ShadowEntry(r, r.generated, None, kv_counted=True, held=True)
        v.entries = entries
        v.busy_until = busy_until


@dataclass
class SimConfig:
    mode: str = "collocated"  # or "pd_disaggregated"
    workers: int = 2
    prefill_workers: int = 1
    decode_workers: int = 1
    max_workers: int | None = None
    kv_capacity: int = 16384
    kv_link: KvLinkModel = field(default_factory=KvLinkModel)
    sync_interval_s: float = 0.1
    decision_latency_s: float = 0.0
    deadline_s: float | None = None
    stall_timeout_s: float = 600.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("collocated", "pd_disaggregated"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.sync_interval_s <= 0:
            raise ValueError("sync_interval_s must be > 0")
        if self.kv_capacity < 1:
            raise ValueError("kv_capacity must be >= 1")

    @property
    def initial_workers(self) -> int:
        return self.workers if self.mode == "collocated" else self.prefill_workers + self.decode_workers


@dataclass
class RunResult:
    requests: list[Request]
    log: EventLog
    workers: list[Worker]
    end_time: float
    incomplete: list[int]
    deadline_hit: bool = False

    @property
    def completed(self) -> list[Request]:
        return [r for r in self.requests if r.completion is not None]


StepObserver = Callable[["Worker", str, list, float, float], None]


class Simulator:
    def __init__(
        self,
        config: SimConfig,
        trace: Iterable[Request],
        oracle: LatencyModel,
        dispatcher,
        migrator=None,
        scaler=None,
        mapper=None,
        estimate: LatencyModel | None = None,
    ):
        self.config = config
        self.requests = [r.fresh() for r in trace]
        for a, b in zip(self.requests, self.requests[1:]):
            if b.arrival_time < a.arrival_time:
                raise ValueError("trace must be sorted by arrival time")
        self.by_id = {r.id: r for r in self.requests}
        if len(self.by_id) != len(self.requests):
            raise ValueError("trace request ids must be unique")
        self.oracle = oracle
        self.estimate = estimate or oracle
        self.now = 0.0
        self.log = EventLog()
        self.rng = np.random.default_rng(config.seed)
        self._queue: list[SimEvent] = []
        self._seq = itertools.count()
        self._next_arrival = 0
        self._remaining = len(self.requests)
        self._last_progress = 0.0
        self._wake_at: float | None = None
        self.step_observers: list[StepObserver] = []
        self.completion_observers: list[Callable[[Request], None]] = []
        self.arrivals_times: list[float] = []
        self.processed_times: list[float] = []
        self.handoff_times: list[float] = []

        self.workers: dict[int, Worker] = {}
        self._build_workers()
        self.monitor = Monitor(self)

        self.dispatcher = dispatcher
        self.migrator = migrator
        self.scaler = scaler
        self.mapper = mapper
        for policy in (dispatcher, migrator, scaler, mapper):
            if policy is not None and hasattr(policy, "attach"):
                policy.attach(self)

    # ------------------------------------------------------------------ setup
    @property
    def disaggregated(self) -> bool:
        return self.config.mode == "pd_disaggregated"

    def _build_workers(self) -> None:
        cfg = self.config
        if cfg.mode == "collocated":
            roles = [Role.COLLOCATED] * cfg.workers
        else:
            roles = [Role.PREFILL] * cfg.prefill_workers + [Role.DECODE] * cfg.decode_workers
        total = max(cfg.max_workers or len(roles), len(roles))
        for wid in range(total):
            if wid < len(roles):
                w = Worker(wid, roles[wid], cfg.kv_capacity, Status.RUNNING)
                w.spans.append([0.0, None])
            else:
                spare = Role.COLLOCATED if cfg.mode == "collocated" else Role.DECODE
                w = Worker(wid, spare, cfg.kv_capacity, Status.WARM)
            self.workers[wid] = w

    def pool(self, role: Role | None = None) -> list[Worker]:
        """Workers accepting new work, optionally restricted to one role."""
        return [w for w in self.workers.values() if w.accepting and (role is None or w.role == role)]

    def active_workers(self) -> list[Worker]:
        return [w for w in self.workers.values() if w.active]

    # ------------------------------------------------------------------ events
    def schedule(self, time: float, kind: EventKind, payload: Any = None) -> None:
        if time < self.now:
            raise AssertionError(f"scheduling {kind} in the past: {time} < {self.now}")
        heapq.heappush(self._queue, SimEvent(time, next(self._seq), kind, payload))

    def request_wake(self, time: float) -> None:
        time = max(time, self.now)
        if self._wake_at is not None and self.now <= self._wake_at <= time:
            return
        self._wake_at = time
        self.schedule(time, EventKind.DISPATCH_WAKE)

    def record(self, event: str, request_id: int | None = None, worker_id: int | None = None, detail: str = "") -> None:
        self.log.append(LogRecord(self.now, event, request_id, worker_id, detail))

    def run(self) -> RunResult:
        if self.requests:
            self.schedule(self.requests[0].arrival_time, EventKind.ARRIVAL)
            self.schedule(self.config.sync_interval_s, EventKind.MONITOR_TICK)
            if self.scaler is not None:
                self.schedule(self.scaler.config.tau_s, EventKind.SCALE_TICK)
        for w in self.workers.values():
            if w.active:
                self.record("worker_start", worker_id=w.id, detail=w.role.value)
        deadline_hit = False
        while self._remaining > 0:
            if not self._queue:
                raise SimulationStall(self.now, self._unfinished())
            ev = heapq.heappop(self._queue)
            if self.config.deadline_s is not None and ev.time > self.config.deadline_s:
                self.now = max(self.now, self.config.deadline_s)
                deadline_hit = True
                break
            self.now = ev.time
            if ev.kind in PROGRESS_EVENTS:
                self._last_progress = self.now
            elif self.now - self._last_progress > self.config.stall_timeout_s:
                raise SimulationStall(self.now, self._unfinished())
            self._handle(ev)
        end = self.now if self.requests else 0.0
        for w in self.workers.values():
            if w.spans and w.spans[-1][1] is None:
                w.spans[-1][1] = end
                self.record("worker_stop", worker_id=w.id, detail="sim_end")
        return RunResult(
            self.requests, self.log, list(self.workers.values()), end,
            self._unfinished(), deadline_hit,
        )

    def _unfinished(self) -> list[int]:
        return [r.id for r in self.requests if r.completion is None]

    def _handle(self, ev: SimEvent) -> None:
        kind = ev.kind
        if kind is EventKind.ARRIVAL:
            self._on_arrival()
        elif kind is EventKind.DISPATCH_WAKE:
            if self._wake_at is not None and self._wake_at <= self.now:
                self._wake_at = None
            self.dispatcher.on_wake(self.now)
        elif kind is EventKind.DELIVER:
            requests, wid = ev.payload
            self._deliver_now(requests, self.workers[wid])
        elif kind is EventKind.PREFILL_DONE:
            self._on_prefill_done(self.workers[ev.payload])
        elif kind is EventKind.DECODE_STEP_DONE:
            self._on_decode_done(self.workers[ev.payload])
        elif kind is EventKind.MIGRATION_DONE:
            self._on_migration_done(*ev.payload)
        elif kind is EventKind.MONITOR_TICK:
            self.monitor.sync()
            self.dispatcher.on_progress(self.now)
            if self.migrator is not None:
                self.migrator.try_migrate(self.now)
            self.schedule(self.now + self.config.sync_interval_s, EventKind.MONITOR_TICK)
        elif kind is EventKind.SCALE_TICK:
            self.scaler.on_tick(self.now)
            self.schedule(self.now + self.scaler.config.tau_s, EventKind.SCALE_TICK)
        elif kind is EventKind.WORKER_READY:
            self._on_worker_ready(self.workers[ev.payload])
        else:  # pragma: no cover
            raise ValueError(kind)

    # ------------------------------------------------------------------ arrivals and dispatch
    def _on_arrival(self) -> None:
        r = self.requests[self._next_arrival]
        self._next_arrival += 1
        if self._next_arrival < len(self.requests):
            self.schedule(self.requests[self._next_arrival].arrival_time, EventKind.ARRIVAL)
        self.arrivals_times.append(self.now)
        self.record("arrival", r.id)
        if r.priority is not None and self.mapper is not None:
            higher = any(q.priority is not None and q.priority < r.priority for q in self.dispatcher.pending())
            r.sched_slo = self.mapper.assign_slo(r, higher_pending=higher)
            self.record("slo_assigned", r.id, detail=f"ttft={r.sched_slo.ttft!r};tpot={r.sched_slo.tpot!r}")
        elif r.sched_slo is None:
            r.sched_slo = r.slo
        self.dispatcher.on_arrival(r, self.now)

    def deliver(self, requests: Sequence[Request], worker: Worker, admitted_by: str = "") -> None:
        """Hand dispatched requests to a worker (after the configured decision latency)."""
        for r in requests:
            r.dispatch_time = self.now
            r.worker_id = worker.id
            r.admitted_by = admitted_by or r.admitted_by
            self.record("dispatch", r.id, worker.id, admitted_by)
        if self.config.decision_latency_s > 0:
            self.schedule(self.now + self.config.decision_latency_s, EventKind.DELIVER, (list(requests), worker.id))
        else:
            self._deliver_now(requests, worker)

    def _deliver_now(self, requests: Sequence[Request], worker: Worker) -> None:
        worker.waiting.extend(requests)
        self.kick(worker)

    # ------------------------------------------------------------------ worker execution
    def kick(self, w: Worker) -> None:
        if w.busy or w.status in (Status.WARM, Status.LOADING, Status.STOPPED):
            return
        if w.role in (Role.COLLOCATED, Role.PREFILL) and w.waiting:
            batch = []
            for r in list(w.waiting):
                need = r.input_len if w.role is Role.PREFILL else peak_kv(r)
                if w.footprint + need <= w.kv_capacity:
                    w.footprint += need
                    batch.append(r)
            if batch:
                for r in batch:
                    w.waiting.remove(r)
                self._start_prefill(w, batch)
                return
            self.record("prefill_deferred", worker_id=w.id, detail=f"waiting={len(w.waiting)}")
        if w.role in (Role.COLLOCATED, Role.DECODE) and w.running:
            self._start_decode(w)
            return
        self._maybe_finish_drain(w)

    def _start_prefill(self, w: Worker, batch: list[Request]) -> None:
        duration = self.oracle.predict_prefill([r.input_len for r in batch])
        w.step_kind, w.step_batch, w.step_start = "prefill", batch, self.now
        w.busy_until = self.now + duration
        for r in batch:
            r.prefill_start = self.now
            self.record("prefill_start", r.id, w.id)
        self.record("prefill_step", worker_id=w.id, detail=f"n={len(batch)};dur={duration!r}")
        for obs in self.step_observers:
            obs(w, "prefill", batch, duration, self.now)
        self.schedule(w.busy_until, EventKind.PREFILL_DONE, w.id)

    def _start_decode(self, w: Worker) -> None:
        batch = list(w.running)
        duration = self.oracle.predict_decode_step([r.current_len for r in batch])
        w.step_kind, w.step_batch, w.step_start = "decode", batch, self.now
        w.busy_until = self.now + duration
        self.record("decode_step", worker_id=w.id, detail=f"n={len(batch)};dur={duration!r}")
        for obs in self.step_observers:
            obs(w, "decode", batch, duration, self.now)
        self.schedule(w.busy_until, EventKind.DECODE_STEP_DONE, w.id)

    def _end_step(self, w: Worker) -> list[Request]:
        batch = w.step_batch
        w.busy_time += self.now - w.step_start
        w.step_kind, w.step_batch = None, []
        return batch

    def _on_prefill_done(self, w: Worker) -> None:
        batch = self._end_step(w)
        for r in batch:
            r.first_token = self.now
            r.generated = 1
            w.kv_used += r.kv_tokens
            self.processed_times.append(self.now)
            self.record("first_token", r.id, w.id)
            if r.output_len == 1:
                self._complete(r, w)
            elif w.role is Role.PREFILL:
                w.prefilled.append(r)
                self.migrator.on_prefill_complete(r, self.now)
            else:
                w.running.append(r)
        self._check_kv(w)
        self.kick(w)
        self._after_progress()

    def _on_decode_done(self, w: Worker) -> None:
        batch = self._end_step(w)
        for r in batch:
            before = r.kv_tokens
            r.generated += 1
            w.kv_used += r.kv_tokens - before
            if r.generated >= r.output_len:
                w.running.remove(r)
                self._complete(r, w)
        self._check_kv(w)
        self.kick(w)
        self._after_progress()

    def _after_progress(self) -> None:
        self.dispatcher.on_progress(self.now)
        if self.migrator is not None:
            self.migrator.try_migrate(self.now)

    def _complete(self, r: Request, w: Worker) -> None:
        r.completion = self.now
        w.kv_used -= r.kv_tokens
        w.footprint -= peak_kv(r)
        self._remaining -= 1
        self.record("completion", r.id, w.id)
        if self.mapper is not None and r.priority is not None:
            self.mapper.record_completion(r)
        for obs in self.completion_observers:
            obs(r)
        if hasattr(self.dispatcher, "observe_completion"):
            self.dispatcher.observe_completion(r)

    def _check_kv(self, w: Worker) -> None:
        if w.kv_used > w.kv_capacity:
            raise AssertionError(f"worker {w.id} KV overflow: {w.kv_used} > {w.kv_capacity}")

    # ------------------------------------------------------------------ migration
    def migration_delay(self, r: Request) -> float:
        # Priced on the current length: the prompt plus the first generated token.
        return self.config.kv_link.delay(r.current_len)

    def has_headroom(self, r: Request, dst: Worker) -> bool:
        return dst.footprint + peak_kv(r) <= dst.kv_capacity and dst.kv_used + r.kv_tokens <= dst.kv_capacity

    def start_migration(self, r: Request, dst: Worker) -> bool:
        """Begin moving a prefilled request's KV to ``dst``; False if ``dst`` lacks headroom."""
        src = self.workers[r.worker_id]
        if r not in src.prefilled:
            raise AssertionError(f"request {r.id} is not awaiting migration on worker {src.id}")
        need = peak_kv(r)
        if not self.has_headroom(r, dst):
            self.record("migration_rejected", r.id, dst.id, f"need={need};footprint={dst.footprint}")
            return False
        src.prefilled.remove(r)
        dst.footprint += need
        dst.incoming.append(r)
        r.decode_worker_id = dst.id
        r.migration_start = self.now
        self.handoff_times.append(self.now)
        delay = self.migration_delay(r)
        self.record("migration_start", r.id, dst.id, f"src={src.id};tokens={r.kv_tokens};delay={delay!r}")
        self.schedule(self.now + delay, EventKind.MIGRATION_DONE, (r.id, src.id, dst.id))
        return True

    def _on_migration_done(self, rid: int, src_id: int, dst_id: int) -> None:
        r = self.by_id[rid]
        src, dst = self.workers[src_id], self.workers[dst_id]
        src.kv_used -= r.kv_tokens
        src.footprint -= r.input_len
        dst.incoming.remove(r)
        dst.kv_used += r.kv_tokens
        dst.running.append(r)
        r.migration_end = self.now
        self.record("migration_end", r.id, dst.id, f"src={src.id};tokens={r.kv_tokens}")
        self._check_kv(dst)
        self.kick(dst)
        self.kick(src)
        self._after_progress()

    # ------------------------------------------------------------------ scaling hooks
    def provision(self, w: Worker, delay: float, role: Role, detail: str = "") -> None:
        w.status = Status.LOADING
        w.role = role
        w.spans.append([self.now, None])
        self.record("scale_out", worker_id=w.id, detail=f"delay={delay!r};{detail}".rstrip(";"))
        self.schedule(self.now + delay, EventKind.WORKER_READY, w.id)

    def _on_worker_ready(self, w: Worker) -> None:
        if self.scaler is not None and hasattr(self.scaler, "role_for_ready"):
            w.role = self.scaler.role_for_ready(w)
        w.status = Status.RUNNING
        self.record("worker_ready", worker_id=w.id, detail=w.role.value)
        self.monitor.sync_worker(w)
        self._notify_added(w)

    def _notify_added(self, w: Worker) -> None:
        if w.role in (Role.COLLOCATED, Role.PREFILL):
            self.dispatcher.on_worker_added(w, self.now)
        if w.role is Role.DECODE and self.migrator is not None:
            self.migrator.on_worker_added(w, self.now)
        self._after_progress()

    def begin_drain(self, w: Worker, new_role: Role | None = None) -> None:
        """Stop admitting to ``w``; it stops (or flips to ``new_role``) once empty."""
        if new_role is None:
            w.status = Status.DRAINING
            self.record("drain_start", worker_id=w.id)
        else:
            w.pending_role = new_role
            self.record("role_flip_pending", worker_id=w.id, detail=f"{w.role.value}->{new_role.value}")
        self.dispatcher.on_worker_removed(w)
        if self.migrator is not None:
            self.migrator.on_worker_removed(w)
        self._maybe_finish_drain(w)

    def _maybe_finish_drain(self, w: Worker) -> None:
        if w.busy or not w.empty:
            return
        if w.pending_role is not None:
            old, w.role, w.pending_role = w.role, w.pending_role, None
            self.record("role_flip", worker_id=w.id, detail=f"{old.value}->{w.role.value}")
            self.monitor.sync_worker(w)
            self._notify_added(w)
        elif w.status is Status.DRAINING:
            w.status = Status.STOPPED
            w.spans[-1][1] = self.now
            self.record("worker_stop", worker_id=w.id, detail="scale_in")
