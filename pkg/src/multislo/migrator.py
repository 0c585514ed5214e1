"""Decode-stage scheduling for P/D-disaggregated mode.

A request becomes eligible for a decode worker only once its prefill is done.
The SLO-aware migrator then offers it to decode workers in order of their
current iteration end, taking the first one with KV headroom whose projected
decode step stays within the tightest TPOT of the resulting batch.
"""

from __future__ import annotations

import math

from .dispatcher import OutputEstimator, RequestQueue
from .engine import Role, ShadowEntry, Simulator, Worker, WorkerView
from .latency import predict_decode_step
from .workload import Request


class MigrationQueue(RequestQueue):
    """Prefilled requests keyed by (TPOT, first-token time, id)."""

    def __init__(self):
        super().__init__(key=lambda r: (r.sched_slo.tpot, r.first_token, r.id))

    def push(self, r: Request) -> None:
        if r.first_token is None:
            raise ValueError(f"request {r.id} has not finished prefill")
        super().push(r)


class SloAwareMigrator:
    name = "slo_aware"

    def __init__(self, outputs: OutputEstimator | None = None):
        self.queue = MigrationQueue()
        self.sim: Simulator | None = None
        self.outputs = outputs
        self.decode_ids: set[int] = set()
        self.selections: list[tuple[int, int]] = []
        self._cache: dict[int, tuple[tuple, list]] = {}

    def attach(self, sim: Simulator) -> None:
        self.sim = sim
        if self.outputs is None:
            self.outputs = getattr(sim.dispatcher, "outputs", None) or OutputEstimator({})
        self.decode_ids = {w.id for w in sim.pool(Role.DECODE)}

    def pending(self) -> list[Request]:
        return list(self.queue)

    def on_worker_added(self, w: Worker, now: float) -> None:
        if w.role is Role.DECODE:
            self.decode_ids.add(w.id)

    def on_worker_removed(self, w: Worker) -> None:
        self.decode_ids.discard(w.id)

    def on_prefill_complete(self, r: Request, now: float) -> None:
        self.queue.push(r)
        self.try_migrate(now)

    # -- feasibility
    def iteration_end(self, worker_id: int, now: float) -> float:
        w = self.sim.workers[worker_id]
        return w.busy_until if w.busy else now

    def _remaining(self, r: Request, generated: int) -> int:
        return self.outputs.remaining(r, max(generated, 1))

    def headroom(self, view: WorkerView) -> int:
        reserved = 0
        for e in view.entries.values():
            if not e.kv_counted:
                reserved += e.request.input_len + max(e.generated - 1, 0)
            reserved += self._remaining(e.request, e.generated)
        return view.kv_capacity - view.kv_used - reserved

    def _projected_len(self, r: Request, generated: int) -> int:
        return r.input_len + max(self.outputs.tokens(r.task), generated + 1)

    def feasible(self, r: Request, view: WorkerView) -> bool:
        if self.headroom(view) < r.kv_tokens + self._remaining(r, r.generated):
            return False
        lengths = [self._projected_len(e.request, e.generated) for e in view.entries.values()]
        lengths.append(self._projected_len(r, r.generated))
        tpot = min([e.request.sched_slo.tpot for e in view.entries.values()] + [r.sched_slo.tpot])
        return predict_decode_step(self.sim.estimate, lengths) <= tpot

    def candidates(self, r: Request, now: float) -> list[int]:
        """Feasible decode workers, earliest iteration end first."""
        order = sorted(self.decode_ids, key=lambda wid: (self.iteration_end(wid, now), wid))
        return [wid for wid in order if self.feasible(r, self.sim.monitor.view(wid))]

    def select_decode_worker(self, r: Request, now: float) -> int | None:
        found = self.candidates(r, now)
        return found[0] if found else None

    def _key(self, view: WorkerView) -> tuple:
        # A view only changes when the monitor replaces its entries or we add to them.
        return id(view.entries), len(view.entries), view.kv_used, self.outputs.version

    def _summary(self, view: WorkerView) -> list:
        """[headroom, projected length total, batch size, min TPOT] for one decode worker."""
        key = self._key(view)
        hit = self._cache.get(view.id)
        if hit is not None and hit[0] == key:
            return list(hit[1])
        entries = view.entries.values()
        agg = [
            self.headroom(view),
            sum(self._projected_len(e.request, e.generated) for e in entries),
            len(view.entries),
            min((e.request.sched_slo.tpot for e in entries), default=math.inf),
        ]
        self._cache[view.id] = (key, agg)
        return list(agg)

    def try_migrate(self, now: float) -> None:
        if not self.decode_ids or not len(self.queue):
            return
        # Same test as ``feasible`` but on per-worker running totals, updated as requests are placed.
        est = self.sim.estimate
        order = sorted(self.decode_ids, key=lambda wid: (self.iteration_end(wid, now), wid))
        agg = {wid: self._summary(self.sim.monitor.view(wid)) for wid in order}
        def has_room(a) -> bool:
            # Could any worker take even a minimal request (2-token context, 1 token of KV)?
            room, total, count, tpot = a
            return room >= 1 and est.a_prime + est.b_prime * (total + 2) + est.c_prime * (count + 1) <= tpot

        open_ids = {wid for wid in order if has_room(agg[wid])}
        for r in self.queue:
            if not open_ids:
                return
            need = r.kv_tokens + self._remaining(r, r.generated)
            length = self._projected_len(r, r.generated)
            for wid in order:
                if wid not in open_ids:
                    continue
                room, total, count, tpot = agg[wid]
                if room < need:
                    continue
                if est.a_prime + est.b_prime * (total + length) + est.c_prime * (count + 1) > min(tpot, r.sched_slo.tpot):
                    continue
                w = self.sim.workers[wid]
                # The worker may still refuse if the estimate was optimistic; fall through to the next one.
                if self.sim.has_headroom(r, w) and self.sim.start_migration(r, w):
                    self.queue.remove(r)
                    view = self.sim.monitor.view(wid)
                    view.entries[r.id] = ShadowEntry(r, r.generated, None)
                    self.selections.append((r.id, wid))
                    agg[wid] = [room - need, total + length, count + 1, min(tpot, r.sched_slo.tpot)]
                    self._cache[wid] = (self._key(view), list(agg[wid]))
                    if not has_room(agg[wid]):
                        open_ids.discard(wid)
                    break


class RoundRobinMigrator:
    """Decode worker chosen in strict rotation when prefill completes, skipping workers without room."""

    name = "round_robin"

    def __init__(self):
        self.queue: list[Request] = []
        self.sim: Simulator | None = None
        self._last = -1

    def attach(self, sim: Simulator) -> None:
        self.sim = sim

    def pending(self) -> list[Request]:
        return list(self.queue)

    def on_worker_added(self, w: Worker, now: float) -> None:
        pass

    def on_worker_removed(self, w: Worker) -> None:
        pass

    def on_prefill_complete(self, r: Request, now: float) -> None:
        self.queue.append(r)
        self.try_migrate(now)

    def try_migrate(self, now: float) -> None:
        while self.queue:
            pool = sorted(self.sim.pool(Role.DECODE), key=lambda w: w.id)
            rotation = [w for w in pool if w.id > self._last] + [w for w in pool if w.id <= self._last]
            r = self.queue[0]
            for w in rotation:
                if self.sim.has_headroom(r, w) and self.sim.start_migration(r, w):
                    self._last = w.id
                    self.queue.pop(0)
                    break
            else:
                return
