"""Tasks, SLOs, requests, synthetic trace generation and trace CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TRACE_HEADER = ("id", "task", "arrival_s", "input_len", "output_len", "priority_or_ttft", "tpot")


@dataclass(frozen=True)
class SloSpec:
    ttft: float
    tpot: float

    def __post_init__(self):
        if not (self.ttft > 0 and self.tpot > 0):
            raise ValueError(f"SLO targets must be > 0, got ttft={self.ttft} tpot={self.tpot}")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    input_len_mean: float
    input_len_std: float
    output_len_mean: float
    output_len_std: float
    slo: SloSpec | None = None
    priority: int | None = None

    def __post_init__(self):
        if self.input_len_mean <= 0 or self.output_len_mean <= 0:
            raise ValueError(f"task {self.name}: length means must be > 0")
        if self.input_len_std < 0 or self.output_len_std < 0:
            raise ValueError(f"task {self.name}: length stds must be >= 0")
        if (self.slo is None) == (self.priority is None):
            raise ValueError(f"task {self.name}: exactly one of slo/priority must be set")


@dataclass(eq=False)
class Request:
    """One inference job.

    ``slo`` is the target the request is judged against.  ``sched_slo`` is what
    the schedulers see: equal to ``slo`` in absolute mode, assigned by the
    priority mapper in priority mode.  ``output_len`` is simulator ground truth
    and must not be read by scheduling policies.
    """

    id: int
    task: str
    arrival_time: float
    input_len: int
    output_len: int
    slo: SloSpec | None = None
    priority: int | None = None
    sched_slo: SloSpec | None = None

    dispatch_time: float | None = None
    prefill_start: float | None = None
    first_token: float | None = None
    migration_start: float | None = None
    migration_end: float | None = None
    completion: float | None = None

    generated: int = 0
    worker_id: int | None = None
    decode_worker_id: int | None = None
    late: bool = False
    admitted_by: str | None = None

    def __post_init__(self):
        if self.input_len < 1 or self.output_len < 1:
            raise ValueError(f"request {self.id}: input_len and output_len must be >= 1")
        if self.sched_slo is None:
            self.sched_slo = self.slo

    @property
    def current_len(self) -> int:
        """Prompt plus generated tokens so far."""
        return self.input_len + self.generated

    @property
    def kv_tokens(self) -> int:
        """Tokens whose KV is materialized: the newest generated token is not yet cached."""
        return self.input_len + max(self.generated - 1, 0)

    @property
    def ttft(self) -> float | None:
        return None if self.first_token is None else self.first_token - self.arrival_time

    @property
    def tpot(self) -> float | None:
        if self.completion is None or self.first_token is None:
            return None
        if self.output_len <= 1:
            return 0.0
        return (self.completion - self.first_token) / (self.output_len - 1)

    @property
    def queue_time(self) -> float | None:
        return None if self.dispatch_time is None else self.dispatch_time - self.arrival_time

    def fresh(self) -> "Request":
        """A copy with all runtime state cleared."""
        return Request(
            self.id, self.task, self.arrival_time, self.input_len, self.output_len,
            slo=self.slo, priority=self.priority,
            sched_slo=self.slo if self.priority is None else None,
        )


def _task(name, ttft, tpot, in_mean, in_std, out_mean, out_std) -> TaskSpec:
    return TaskSpec(name, in_mean, in_std, out_mean, out_std, slo=SloSpec(ttft, tpot))


def builtin_task_sets() -> dict[str, list[TaskSpec]]:
    """Benchmark task mixes with per-task SLO targets and length statistics."""
    return {
        "4task": [
            _task("medical_qa", 0.7, 0.5, 32.57, 10.32, 38.92, 16.83),
            _task("tldr_content_gen", 1.0, 0.7, 44.38, 6.58, 96.04, 35.03),
            _task("tldr_headline_gen", 2.0, 0.9, 121.82, 35.04, 13.59, 6.55),
            _task("wikisql", 20.0, 1.0, 643.22, 337.01, 27.82, 4.84),
        ],
        "2task": [
            _task("gsm8k", 0.7, 0.2, 51.44, 15.78, 90.13, 26.73),
            _task("sharegpt", 2.0, 0.5, 259.19, 324.88, 207.79, 234.99),
        ],
    }


def task_set(name: str) -> list[TaskSpec]:
    sets = builtin_task_sets()
    if name not in sets:
        raise KeyError(f"unknown task set {name!r}; known: {', '.join(sorted(sets))}")
    return sets[name]


def priority_task_set(name: str) -> list[TaskSpec]:
    """The same tasks in priority mode: row order maps to P0 (tightest) .. P{N-1}."""
    return [replace(t, slo=None, priority=i) for i, t in enumerate(task_set(name))]


@dataclass(frozen=True)
class PriorityBounds:
    min_ttft: float
    max_ttft: float
    min_tpot: float
    max_tpot: float

    def __post_init__(self):
        if self.min_ttft > self.max_ttft or self.min_tpot > self.max_tpot:
            raise ValueError(f"priority bounds min > max: {self}")

    @property
    def midpoint(self) -> SloSpec:
        return SloSpec((self.min_ttft + self.max_ttft) / 2, (self.min_tpot + self.max_tpot) / 2)


def default_priority_bounds(name: str, spread: float = 0.25) -> list[PriorityBounds]:
    """Per-priority SLO ranges: each task's target +/- ``spread``."""
    out = []
    for t in task_set(name):
        out.append(
            PriorityBounds(
                t.slo.ttft * (1 - spread), t.slo.ttft * (1 + spread),
                t.slo.tpot * (1 - spread), t.slo.tpot * (1 + spread),
            )
        )
    return out


def _sample_lengths(rng: np.random.Generator, mean: float, std: float, n: int) -> np.ndarray:
    values = np.rint(rng.normal(mean, std, size=n)) if std > 0 else np.full(n, round(mean))
    return np.maximum(values, 1).astype(np.int64)


def _finalize(raw: list[tuple[float, int, int, TaskSpec, int, int]], bounds: Sequence[PriorityBounds] | None) -> list[Request]:
    raw.sort(key=lambda x: (x[0], x[1], x[2]))
    out = []
    for new_id, (arrival, _, _, task, in_len, out_len) in enumerate(raw):
        if task.priority is not None:
            # Priority-mode requests are judged against the midpoint of their bounds.
            target = bounds[task.priority].midpoint if bounds is not None else None
            out.append(Request(new_id, task.name, arrival, in_len, out_len, slo=target, priority=task.priority))
        else:
            out.append(Request(new_id, task.name, arrival, in_len, out_len, slo=task.slo))
    return out


def generate(
    tasks: Sequence[TaskSpec],
    per_task_count: int,
    qps: float,
    seed: int,
    priority_bounds: Sequence[PriorityBounds] | None = None,
) -> list[Request]:
    """Merged per-task Poisson streams at ``qps / len(tasks)`` each, sorted by arrival then id."""
    if not qps > 0:
        raise ValueError("qps must be > 0")
    if per_task_count < 1:
        raise ValueError("per_task_count must be >= 1")
    rng = np.random.default_rng(seed)
    per_task_rate = qps / len(tasks)
    raw = []
    for ti, task in enumerate(tasks):
        scale = 0.0 if math.isinf(per_task_rate) else 1.0 / per_task_rate
        arrivals = np.cumsum(rng.exponential(scale, size=per_task_count))
        ins = _sample_lengths(rng, task.input_len_mean, task.input_len_std, per_task_count)
        outs = _sample_lengths(rng, task.output_len_mean, task.output_len_std, per_task_count)
        for k in range(per_task_count):
            raw.append((float(arrivals[k]), ti, k, task, int(ins[k]), int(outs[k])))
    return _finalize(raw, priority_bounds)


def generate_phases(
    tasks: Sequence[TaskSpec],
    phases: Iterable[tuple[float, float, float]],
    seed: int,
    priority_bounds: Sequence[PriorityBounds] | None = None,
) -> list[Request]:
    """Time-varying load: each ``(start_s, end_s, qps)`` phase is a Poisson stream split evenly over ``tasks``."""
    rng = np.random.default_rng(seed)
    raw = []
    for pi, (start, end, qps) in enumerate(phases):
        if qps <= 0 or end <= start:
            continue
        per_task_rate = qps / len(tasks)
        for ti, task in enumerate(tasks):
            t = start
            k = 0
            while True:
                t += rng.exponential(1.0 / per_task_rate)
                if t >= end:
                    break
                in_len = int(_sample_lengths(rng, task.input_len_mean, task.input_len_std, 1)[0])
                out_len = int(_sample_lengths(rng, task.output_len_mean, task.output_len_std, 1)[0])
                raw.append((float(t), ti, pi * 10**6 + k, task, in_len, out_len))
                k += 1
    return _finalize(raw, priority_bounds)


def ramp_workload(
    tasks: Sequence[TaskSpec],
    rate_per_client: float = 15.0,
    stagger_s: float = 20.0,
    end_s: float = 90.0,
    seed: int = 0,
    priority_bounds: Sequence[PriorityBounds] | None = None,
) -> list[Request]:
    """Clients join one at a time, lowest priority (last task) first, each at ``rate_per_client``."""
    rng = np.random.default_rng(seed)
    raw = []
    n = len(tasks)
    for order, ti in enumerate(reversed(range(n))):
        task = tasks[ti]
        t = order * stagger_s
        k = 0
        while True:
            t += rng.exponential(1.0 / rate_per_client)
            if t >= end_s:
                break
            in_len = int(_sample_lengths(rng, task.input_len_mean, task.input_len_std, 1)[0])
            out_len = int(_sample_lengths(rng, task.output_len_mean, task.output_len_std, 1)[0])
            raw.append((float(t), ti, k, task, in_len, out_len))
            k += 1
    return _finalize(raw, priority_bounds)


def write_trace(path: str | Path, trace: Iterable[Request]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for r in trace:
            if r.priority is not None:
                slo_a, slo_b = r.priority, ""
            else:
                slo_a, slo_b = repr(r.slo.ttft), repr(r.slo.tpot)
            writer.writerow([r.id, r.task, repr(r.arrival_time), r.input_len, r.output_len, slo_a, slo_b])


def read_trace(path: str | Path, priority_bounds: Sequence[PriorityBounds] | None = None) -> list[Request]:
    """Load a trace; rows with an empty ``tpot`` column are priority-mode requests."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_HEADER:
            raise ValueError(f"{path}: expected header {','.join(TRACE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                common = dict(
                    id=int(row["id"]), task=row["task"], arrival_time=float(row["arrival_s"]),
                    input_len=int(row["input_len"]), output_len=int(row["output_len"]),
                )
                if row["tpot"] == "":
                    prio = int(row["priority_or_ttft"])
                    target = priority_bounds[prio].midpoint if priority_bounds is not None else None
                    out.append(Request(**common, slo=target, priority=prio))
                else:
                    out.append(Request(**common, slo=SloSpec(float(row["priority_or_ttft"]), float(row["tpot"]))))
            except (KeyError, ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out
