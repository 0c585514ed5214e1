
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from multislo.priority import PriorityMapper, SloWindow, priority_index
from multislo.workload import PriorityBounds, Request, default_priority_bounds


def test_index_examples():
    assert priority_index(1, [8, 12, 6, 4]) == 12
    assert priority_index(0, [10, 3, 3, 3]) == 2
    assert priority_index(3, [0, 0, 0, 5]) == 4


def test_index_empty_window_and_range():
    assert priority_index(2, [0, 0, 0, 0]) is None
    with pytest.raises(ValueError):
        priority_index(4, [1, 1, 1, 1])


def test_index_clamped_when_own_class_empty():
    # p=3 has no records: base 6 would point past the end.
    assert priority_index(3, [2, 2, 2, 0]) == 5


@given(st.lists(st.integers(0, 20), min_size=1, max_size=6), st.data())
def test_index_matches_bruteforce(counts, data):
    p = data.draw(st.integers(0, len(counts) - 1))
    assert priority_index(p, counts) == oracles.priority_index_bruteforce(p, counts)


@settings(max_examples=200)
@given(st.lists(st.integers(1, 10), min_size=2, max_size=5), st.randoms(use_true_random=False))
def test_monotone_bias(counts, rnd):
    values = sorted(rnd.random() for _ in range(sum(counts)))
    reads = [values[priority_index(p, counts)] for p in range(len(counts))]
    assert reads == sorted(reads)


# -- window ---------------------------------------------------------------------------------------

def test_window_eviction_keeps_size():
    w = SloWindow(2, size=3)
    for i in range(4):
        w.insert(i % 2, 0.1 * (i + 1), 0.01, 0.0, float(i))
    assert len(w) == 3
    assert [t for t, _, _ in w.ttft_records] == pytest.approx([0.2, 0.3, 0.4])


def test_window_sorted_insert():
    w = SloWindow(1, size=10)
    for ttft in (0.3, 0.7, 0.5):
        w.insert(0, ttft, 0.01, 0.0, 0.0)
    assert [t for t, _, _ in w.ttft_records] == [0.3, 0.5, 0.7]


def test_eviction_decrements_count():
    w = SloWindow(3, size=2)
    w.insert(2, 0.1, 0.01, 0.0, 0.0)
    w.insert(0, 0.2, 0.01, 0.0, 1.0)
    w.insert(1, 0.3, 0.01, 0.0, 2.0)
    assert w.counts == [1, 1, 0]


@settings(max_examples=100)
@given(st.integers(1, 8), st.lists(st.tuples(st.integers(0, 3), st.floats(0, 5), st.floats(0, 1)), max_size=40))
def test_window_matches_bruteforce(size, records):
    w = SloWindow(4, size=size)
    for i, (p, ttft, tpot) in enumerate(records):
        w.insert(p, ttft, tpot, 0.0, float(i))
    kept = records[-size:] if records else []
    assert w.counts == [sum(1 for p, _, _ in kept if p == k) for k in range(4)]
    assert sum(w.counts) == len(w) == len(kept)
    assert [t for t, _, _ in w.ttft_records] == sorted(t for _, t, _ in kept)
    assert [t for t, _ in w.tpot_records] == sorted(t for _, _, t in kept)


# -- mapper ---------------------------------------------------------------------------------------

def prio_request(i, p, arrival=0.0):
    return Request(i, "t", arrival, 10, 4, priority=p)


def completed(i, p, ttft, tpot, queue_time):
    r = prio_request(i, p)
    r.dispatch_time = queue_time
    r.first_token = ttft
    r.completion = ttft + tpot * 3
    r.generated = 4
    return r


def test_midpoint_fallback():
    bounds = default_priority_bounds("4task")
    mapper = PriorityMapper(bounds)
    slo = mapper.assign_slo(prio_request(0, 1))
    assert slo.ttft == pytest.approx(1.0)
    assert slo.tpot == pytest.approx(bounds[1].midpoint.tpot)


def test_clamp_to_lower_bound():
    bounds = default_priority_bounds("4task")
    mapper = PriorityMapper(bounds)
    mapper.record_completion(completed(0, 0, 0.3, 0.1, 0.0))
    slo = mapper.assign_slo(prio_request(1, 0), higher_pending=True)
    assert slo.ttft == pytest.approx(0.525)


def test_equal_queue_time_means_no_correction():
    bounds = [PriorityBounds(0.0, 10.0, 0.0, 10.0)]
    mapper = PriorityMapper(bounds)
    mapper.record_completion(completed(0, 0, 2.0, 0.5, 0.25))
    first = mapper.assign_slo(prio_request(1, 0))
    second = mapper.assign_slo(prio_request(2, 0))
    assert first.ttft == second.ttft == pytest.approx(2.0)


def test_queue_time_correction_shifts_ttft():
    bounds = [PriorityBounds(0.0, 10.0, 0.0, 10.0)]
    mapper = PriorityMapper(bounds, window_size=1)
    mapper.record_completion(completed(0, 0, 2.0, 0.5, 0.2))
    mapper.assign_slo(prio_request(1, 0))  # last queue time 0.2
    mapper.record_completion(completed(2, 0, 3.0, 0.5, 1.0))
    # Looked-up 3.0 minus the 0.8 s queue-time jump.
    assert mapper.assign_slo(prio_request(3, 0)).ttft == pytest.approx(2.2)


def test_relaxed_lower_bound_without_contention():
    bounds = default_priority_bounds("4task")
    mapper = PriorityMapper(bounds)
    mapper.record_completion(completed(0, 3, 0.1, 0.01, 0.0))
    relaxed = mapper.assign_slo(prio_request(1, 3), higher_pending=False)
    strict = mapper.assign_slo(prio_request(2, 3), higher_pending=True)
    assert relaxed.ttft == pytest.approx(min(b.min_ttft for b in bounds))
    assert strict.ttft == pytest.approx(bounds[3].min_ttft)
    strict_mapper = PriorityMapper(bounds, relax_lower_bound=False)
    strict_mapper.record_completion(completed(0, 3, 0.1, 0.01, 0.0))
    assert strict_mapper.assign_slo(prio_request(1, 3), higher_pending=False).ttft == pytest.approx(bounds[3].min_ttft)


@settings(max_examples=100)
@given(
    st.lists(st.tuples(st.integers(0, 3), st.floats(0, 30), st.floats(0, 2), st.floats(0, 5)), max_size=30),
    st.lists(st.integers(0, 3), min_size=1, max_size=10),
    st.booleans(),
)
def test_clamp_totality(history, asks, relax):
    bounds = default_priority_bounds("4task")
    mapper = PriorityMapper(bounds, window_size=8, relax_lower_bound=relax)
    for i, (p, ttft, tpot, qt) in enumerate(history):
        mapper.record_completion(completed(i, p, ttft, tpot, qt))
    for j, p in enumerate(asks):
        slo = mapper.assign_slo(prio_request(1000 + j, p), higher_pending=True)
        b = bounds[p]
        assert b.min_ttft <= slo.ttft <= b.max_ttft
        assert b.min_tpot <= slo.tpot <= b.max_tpot


def test_incomplete_records_ignored():
    mapper = PriorityMapper(default_priority_bounds("4task"))
    mapper.record_completion(prio_request(0, 1))
    assert len(mapper.window) == 0


def test_window_size_validated():
    with pytest.raises(ValueError):
        SloWindow(2, size=0)
    with pytest.raises(ValueError):
        PriorityMapper([])
