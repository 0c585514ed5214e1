import csv
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from multislo.dispatcher import SloAwareDispatcher
from multislo.engine import Role, SimConfig, Simulator, Worker
from multislo.latency import MODEL_PROFILES
from multislo.metrics import (
    attainment, compare_summaries, cost_seconds, cost_units, e2e_latency, percentile, summarize, worker_units,
    write_results, write_summary,
)
from multislo.workload import Request, SloSpec, generate, task_set


def done(i, ttft, tpot, slo=SloSpec(1.0, 0.1), arrival=0.0, output_len=11):
    r = Request(i, "t", arrival, 10, output_len, slo=slo)
    r.first_token = arrival + ttft
    r.completion = r.first_token + tpot * (output_len - 1)
    r.generated = output_len
    return r


def worker(wid, spans):
    w = Worker(wid, Role.COLLOCATED, 1024)
    w.spans = [list(s) for s in spans]
    return w


def test_attainment_examples():
    ok = [done(i, 0.5, 0.05) for i in range(3)]
    assert attainment(ok + [done(3, 2.0, 0.05)]) == 0.75
    # Meeting TTFT alone contributes nothing.
    assert attainment([done(0, 0.5, 0.2)]) == 0.0
    assert attainment(ok) == 1.0
    assert attainment([]) is None


def test_incomplete_counts_as_violation():
    pending = Request(9, "t", 0.0, 10, 5, slo=SloSpec(1, 1))
    assert attainment([done(0, 0.5, 0.05), pending]) == 0.5


def test_cost_examples():
    ws = [worker(0, [(0.0, 10.0)]), worker(1, [(5.0, 15.0)])]
    assert cost_seconds(ws, unit_cost=1.0) == pytest.approx(20.0)
    assert worker_units(10.0) == 200
    assert cost_units([worker(0, [(0.0, 10.0)]), worker(1, [])]) == 200
    assert worker_units(0.0) == 0
    # Partial units round up per worker.
    assert worker_units(0.051) == 2


def test_e2e_and_percentile():
    r = done(0, 1.0, 0.15, arrival=1.0)
    assert e2e_latency(r) == pytest.approx(2.5)
    assert e2e_latency(Request(1, "t", 0.0, 1, 1, slo=SloSpec(1, 1))) is None
    assert percentile([1, 2, 3], 50) == 2
    assert percentile([3, 1, 2, 4], 50) == 2
    assert percentile([5], 99) == 5
    assert percentile([], 50) is None
    with pytest.raises(ValueError):
        percentile([1], 0)


@given(st.lists(st.floats(0, 100), min_size=1, max_size=50), st.floats(0.1, 100))
def test_percentile_is_a_member_and_monotone(values, q):
    p = percentile(values, q)
    assert p in values
    assert percentile(values, min(q + 5, 100)) >= p


def _run(seed=0, workers=2):
    trace = generate(task_set("4task"), 40, 60, seed=seed)
    d = SloAwareDispatcher(output_priors={t.name: t.output_len_mean for t in task_set("4task")})
    return Simulator(SimConfig(workers=workers), trace, MODEL_PROFILES["7B"], d).run()


def test_summary_matches_csv_bruteforce(tmp_path):
    result = _run()
    write_results(tmp_path / "requests.csv", result.requests)
    result.log.write_csv(tmp_path / "events.csv")
    summary = summarize(result)
    with open(tmp_path / "requests.csv") as fh:
        rows = list(csv.DictReader(fh))
    slos = {r.id: (r.slo.ttft, r.slo.tpot) for r in result.requests}
    assert summary["attainment"] == float(oracles.attainment_from_csv(rows, slos))
    with open(tmp_path / "events.csv") as fh:
        events = list(csv.DictReader(fh))
    units, _ = oracles.cost_units_from_events(events)
    assert summary["cost_units"] == units


def test_cost_invariant_to_interleaving(tmp_path):
    result = _run(seed=1)
    result.log.write_csv(tmp_path / "events.csv")
    with open(tmp_path / "events.csv") as fh:
        events = list(csv.DictReader(fh))
    base, _ = oracles.cost_units_from_events(events)
    # Shuffle across workers while keeping each worker's own events in order.
    by_worker = {}
    for row in events:
        by_worker.setdefault(row["worker_id"], []).append(row)
    rng = random.Random(0)
    shuffled, cursors = [], {k: 0 for k in by_worker}
    while any(cursors[k] < len(v) for k, v in by_worker.items()):
        k = rng.choice([k for k, v in by_worker.items() if cursors[k] < len(v)])
        shuffled.append(by_worker[k][cursors[k]])
        cursors[k] += 1
    assert oracles.cost_units_from_events(shuffled)[0] == base


def test_summary_fields(tmp_path):
    result = _run()
    s = summarize(result)
    for key in ("attainment", "cost_units", "cost_seconds", "p50_e2e_s", "p95_e2e_s", "p99_e2e_s", "per_task", "violations"):
        assert key in s
    assert set(s["violations"]) == {"ttft_only", "tpot_only", "both", "incomplete"}
    assert sum(s["violations"].values()) == round((1 - s["attainment"]) * s["requests"])
    assert set(s["per_task"]) == {t.name for t in task_set("4task")}
    write_summary(tmp_path / "s.json", s)
    assert (tmp_path / "s.json").read_text().endswith("}\n")


def test_compare_summaries():
    a = {"attainment": 0.5, "per_task": {"x": {"p50": 1.0}}, "same": 1}
    b = {"attainment": 0.75, "per_task": {"x": {"p50": 2.0}}, "same": 1}
    assert compare_summaries(a, b) == [("attainment", 0.5, 0.75), ("per_task.x.p50", 1.0, 2.0)]
    assert compare_summaries(a, a) == []
