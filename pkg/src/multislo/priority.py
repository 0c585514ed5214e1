"""Priority-to-SLO mapping from a sliding window of recent outcomes.

Each completion inserts its (TTFT, queue time) and TPOT into two sorted
windows.  A new request of priority ``p`` reads both windows at an index that
skips every record of a higher priority and then lands part-way into its own
class, so higher priorities read lower latencies.
"""

from __future__ import annotations

import bisect
import itertools
from collections import deque
from dataclasses import dataclass
from typing import Sequence

from .workload import PriorityBounds, Request, SloSpec


def priority_index(p: int, counts: Sequence[int], n_levels: int | None = None) -> int | None:
    """Window index for priority ``p``; None when the window is empty."""
    n = len(counts) if n_levels is None else n_levels
    if not 0 <= p < n:
        raise ValueError(f"priority {p} outside [0, {n})")
    total = sum(counts)
    if total == 0:
        return None
    base = sum(counts[:p])
    offset = ((p + 1) * counts[p]) // (n + 1)
    return min(max(base + offset, 0), total - 1)


@dataclass(frozen=True)
class _Record:
    seq: int
    priority: int
    ttft: float
    tpot: float
    queue_time: float
    completion: float


class SloWindow:
    """Two sorted windows of the last ``size`` completions plus per-priority counts."""

    def __init__(self, n_levels: int, size: int = 50):
        if size < 1:
            raise ValueError("window size must be >= 1")
        self.n_levels = n_levels
        self.size = size
        self.records: deque[_Record] = deque()  # completion order, oldest first
        self.ttft_records: list[tuple[float, float, int]] = []  # (ttft, queue_time, seq)
        self.tpot_records: list[tuple[float, int]] = []
        self.counts = [0] * n_levels
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self.records)

    def insert(self, priority: int, ttft: float, tpot: float, queue_time: float, completion: float) -> None:
        rec = _Record(next(self._seq), priority, ttft, tpot, queue_time, completion)
        self.records.append(rec)
        bisect.insort(self.ttft_records, (rec.ttft, rec.queue_time, rec.seq))
        bisect.insort(self.tpot_records, (rec.tpot, rec.seq))
        self.counts[priority] += 1
        if len(self.records) > self.size:
            self._evict(self.records.popleft())

    def _evict(self, rec: _Record) -> None:
        i = bisect.bisect_left(self.ttft_records, (rec.ttft, rec.queue_time, rec.seq))
        del self.ttft_records[i]
        j = bisect.bisect_left(self.tpot_records, (rec.tpot, rec.seq))
        del self.tpot_records[j]
        self.counts[rec.priority] -= 1


class PriorityMapper:
    """Assigns scheduling SLOs to priority-mode requests.

    ``relax_lower_bound``: when no higher-priority request is pending, the lower
    clamp drops to the tightest bound of any priority so an uncontended
    low-priority request may be served as fast as the system allows.
    """

    def __init__(self, bounds: Sequence[PriorityBounds], window_size: int = 50, relax_lower_bound: bool = True):
        if not bounds:
            raise ValueError("at least one priority level is required")
        self.bounds = list(bounds)
        self.window = SloWindow(len(self.bounds), window_size)
        self.relax_lower_bound = relax_lower_bound
        self.last_queue_time: list[float | None] = [None] * len(self.bounds)
        self.floor_ttft = min(b.min_ttft for b in self.bounds)
        self.floor_tpot = min(b.min_tpot for b in self.bounds)
        self.assignments: list[tuple[int, int, SloSpec, bool]] = []

    @property
    def n_levels(self) -> int:
        return len(self.bounds)

    def lookup(self, p: int) -> tuple[float, float, float] | None:
        idx = priority_index(p, self.window.counts, self.n_levels)
        if idx is None:
            return None
        ttft, queue_time, _ = self.window.ttft_records[idx]
        tpot, _ = self.window.tpot_records[idx]
        return ttft, queue_time, tpot

    def assign_slo(self, r: Request, higher_pending: bool = True) -> SloSpec:
        p = r.priority
        b = self.bounds[p]
        found = self.lookup(p)
        if found is None:
            slo = b.midpoint
        else:
            ttft, queue_time, tpot = found
            last = self.last_queue_time[p]
            # Shift by the change in queue time so one queueing spike does not stick to the SLO.
            if last is not None:
                ttft -= queue_time - last
            self.last_queue_time[p] = queue_time
            strict = higher_pending or not self.relax_lower_bound
            lo_ttft = b.min_ttft if strict else self.floor_ttft
            lo_tpot = b.min_tpot if strict else self.floor_tpot
            slo = SloSpec(min(max(ttft, lo_ttft), b.max_ttft), min(max(tpot, lo_tpot), b.max_tpot))
        self.assignments.append((r.id, p, slo, higher_pending))
        return slo

    def record_completion(self, r: Request) -> None:
        if r.priority is None or r.ttft is None or r.tpot is None:
            return
        self.window.insert(r.priority, r.ttft, r.tpot, r.queue_time or 0.0, r.completion)
