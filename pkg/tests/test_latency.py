import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multislo.latency import (
    FitUnderdetermined, LatencyModel, ProfileSample, fit, load_model, predict_decode_step, predict_prefill,
    profiling_grid, read_samples, save_model, synthesize_samples, write_samples,
)

import oracles

REFERENCE = LatencyModel(0.05, 2e-4, 1e-8, 0.02, 1e-5, 1e-3)


def test_prefill_examples():
    assert predict_prefill(LatencyModel(0, 1, 0, 0, 0, 0), [10]) == 10.0
    assert predict_prefill(LatencyModel(0.01, 1e-4, 1e-8, 0, 0, 0), [100, 200]) == pytest.approx(0.0405, abs=1e-15)
    assert predict_prefill(LatencyModel(0.05, 0, 0, 0, 0, 0), [7, 900, 3]) == 0.05


def test_decode_examples():
    assert predict_decode_step(LatencyModel(0, 0, 0, 0.02, 1e-5, 1e-3), [150, 300]) == pytest.approx(0.0265, abs=1e-15)
    assert predict_decode_step(LatencyModel(0, 0, 0, 0, 0, 1), [5, 6, 7]) == 3.0
    assert predict_decode_step(LatencyModel(0, 0, 0, 0.1, 0, 0), [42]) == 0.1


@pytest.mark.parametrize("fn", [predict_prefill, predict_decode_step])
def test_empty_batch_rejected(fn):
    with pytest.raises(ValueError):
        fn(REFERENCE, [])


def test_prefill_rejects_zero_length():
    with pytest.raises(ValueError):
        predict_prefill(REFERENCE, [3, 0])


@pytest.mark.parametrize("bad", [-1e-3, math.nan, math.inf])
def test_model_validates_coefficients(bad):
    with pytest.raises(ValueError):
        LatencyModel(bad, 0, 0, 0, 0, 0)


def test_profiling_grid():
    grid = profiling_grid()
    assert len(grid) == 176
    assert grid[0] == (1, 4)
    assert (192, 2020) in grid
    assert len(set(grid)) == 176


def test_noiseless_fit_recovers_coefficients():
    result = fit(synthesize_samples(REFERENCE))
    for name, want in REFERENCE.to_dict().items():
        got = getattr(result.model, name)
        assert abs(got - want) / want < 1e-6, name
    assert result.max_rel_residual_prefill < 1e-9


def test_noisy_fit_within_five_percent():
    # 1% multiplicative noise; c is the least identified coefficient (see notes on seed sensitivity).
    result = fit(synthesize_samples(REFERENCE, noise=0.01, seed=0))
    for name, want in REFERENCE.to_dict().items():
        assert abs(getattr(result.model, name) - want) / want < 0.05, name
    assert 0 < result.max_rel_residual_decode < 0.1


def test_fit_too_few_samples():
    with pytest.raises(FitUnderdetermined):
        fit(synthesize_samples(REFERENCE, grid=[(1, 4), (2, 8)]))


def test_fit_rank_deficient_names_phase():
    # One input length and one batch size: every row is identical.
    samples = synthesize_samples(REFERENCE, grid=[(4, 64)] * 5)
    with pytest.raises(FitUnderdetermined, match="prefill"):
        fit(samples)


def test_fit_decode_rank_deficiency_detected():
    # With batch size fixed at 1 the decode B column equals the intercept column.
    samples = synthesize_samples(REFERENCE, grid=[(1, 4), (1, 64), (1, 512), (1, 2020)])
    with pytest.raises(FitUnderdetermined, match="decode"):
        fit(samples)


def test_negative_coefficient_clamped_with_warning():
    # Decode data with a decreasing trend in batch size forces c' < 0.
    samples = [ProfileSample(b, (4 * b,) * b, 0.1 + 0.001 * b, max(0.05 - 0.0002 * b, 0.001)) for b in (1, 2, 4, 8, 16, 32)]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = fit(samples)
    assert result.model.c_prime == 0.0 or result.model.b_prime == 0.0
    assert result.notes and any(issubclass(w.category, RuntimeWarning) for w in caught)


def test_samples_csv_roundtrip(tmp_path):
    samples = synthesize_samples(REFERENCE, grid=[(1, 4), (3, 17)], noise=0.01, seed=3)
    path = tmp_path / "s.csv"
    write_samples(path, samples)
    assert path.read_text().splitlines()[0] == "batch_size,input_lengths,prefill_s,decode_step_s"
    assert read_samples(path) == samples


def test_samples_csv_reports_line(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("batch_size,input_lengths,prefill_s,decode_step_s\n1,4,0.1,0.1\n2,4,0.1,0.1\n")
    with pytest.raises(ValueError, match=":3:"):
        read_samples(path)


def test_model_json_roundtrip(tmp_path):
    path = tmp_path / "m.json"
    save_model(path, fit(synthesize_samples(REFERENCE)))
    loaded = load_model(path)
    assert loaded.a == pytest.approx(REFERENCE.a, rel=1e-9)


lengths = st.lists(st.integers(1, 4096), min_size=1, max_size=32)
coef = st.floats(0, 1e-2, allow_nan=False)


@given(lengths, st.integers(0, 31), st.integers(1, 100), coef, coef, st.floats(0, 1e-6))
def test_prefill_monotone_in_each_length(ls, i, bump, a, b, c):
    model = LatencyModel(a, b, c, 0, 0, 0)
    i %= len(ls)
    bigger = list(ls)
    bigger[i] += bump
    assert predict_prefill(model, bigger) >= predict_prefill(model, ls)


@given(lengths, st.integers(1, 4096), coef, coef, coef)
def test_decode_monotone_in_batch_size(ls, extra, a, b, c):
    model = LatencyModel(0, 0, 0, a, b, c)
    assert predict_decode_step(model, ls + [extra]) >= predict_decode_step(model, ls)


@given(lengths, coef, coef, st.floats(0, 1e-6))
def test_prefill_matches_oracle(ls, a, b, c):
    assert predict_prefill(LatencyModel(a, b, c, 0, 0, 0), ls) == pytest.approx(oracles.prefill((a, b, c), ls), rel=1e-12, abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 0.1), st.floats(1e-6, 1e-3), st.floats(1e-10, 1e-7),
       st.floats(1e-3, 0.1), st.floats(1e-7, 1e-4), st.floats(1e-5, 1e-2))
def test_fit_generate_identity(a, b, c, ap, bp, cp):
    model = LatencyModel(a, b, c, ap, bp, cp)
    got = fit(synthesize_samples(model)).model
    for name, want in model.to_dict().items():
        assert abs(getattr(got, name) - want) / want < 1e-6, name
