import csv
import json
import statistics
from pathlib import Path

import pytest

from multislo.cli import EXIT_CONFIG, EXIT_OK, EXIT_STALL, main
from multislo.config import OUT_ENV, ConfigError, RunConfig, build_simulation, output_dir, parse_config
from multislo.latency import MODEL_PROFILES, load_model

SMALL = """\
model: 7B
workers: 2
workload:
  task_set: 4task
  qps: 20
  per_task_count: 15
  seed: 0
"""


def write(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# -- parsing -------------------------------------------------------------------------------------------

def test_parse_defaults_and_sections():
    cfg = parse_config(SMALL)
    assert cfg.workers == 2 and cfg.workload.per_task_count == 15
    assert cfg.scaler.enabled is False and cfg.dispatch_policy == "slo_aware"
    assert parse_config("") == RunConfig()


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError) as err:
        parse_config(SMALL + "  bogus: 1\n", "cfg.yaml")
    assert err.value.line == 8
    assert "cfg.yaml:8" in str(err.value) and "workload.bogus" in str(err.value)


def test_type_error_reports_line():
    with pytest.raises(ConfigError) as err:
        parse_config(SMALL.replace("workers: 2", "workers: two"))
    assert err.value.line == 2


def test_validation_error_points_at_key():
    with pytest.raises(ConfigError) as err:
        parse_config(SMALL.replace("qps: 20", "qps: -1"))
    assert err.value.line == 5 and err.value.key == "workload.qps"
    with pytest.raises(ConfigError) as err:
        parse_config("workers: 1\nmode: sideways\n")
    assert err.value.line == 2


def test_unknown_model_profile():
    with pytest.raises(ConfigError) as err:
        parse_config("model: 13B\n")
    assert err.value.line == 1 and "13B" in str(err.value)


def test_custom_coefficients_and_exponent_strings():
    cfg = parse_config(
        "model: {a: 0.01, b: 1e-4, c: 1e-8, a_prime: 0.02, b_prime: 1e-5, c_prime: 1e-3}\n"
        "kv_link:\n  per_token_s: 1e-6\n"
    )
    assert cfg.kv_link.per_token_s == 1e-6
    sim = build_simulation(cfg.with_overrides(), [])
    assert sim.oracle.b == 1e-4


def test_invalid_yaml():
    with pytest.raises(ConfigError) as err:
        parse_config("workers: [1,\n")
    assert err.value.line is not None


def test_scaler_defaults_double_initial_workers():
    cfg = parse_config("workers: 3\nscaler:\n  enabled: true\n")
    sim = build_simulation(cfg, [])
    assert sim.scaler.config.min_workers == 3 and sim.scaler.config.max_workers == 6
    assert len(sim.workers) == 6


def test_output_dir_precedence(monkeypatch):
    cfg = RunConfig(output_dir="from_config")
    monkeypatch.delenv(OUT_ENV, raising=False)
    assert output_dir(cfg) == Path("from_config")
    monkeypatch.setenv(OUT_ENV, "from_env")
    assert output_dir(cfg) == Path("from_env")
    assert output_dir(cfg, "from_flag") == Path("from_flag")


# -- run -----------------------------------------------------------------------------------------------

def test_run_writes_artifacts_and_is_reproducible(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert main(["run", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["run", cfg, "--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("events.csv", "requests.csv", "summary.json"):
        assert (tmp_path / "a" / name).exists()
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["requests"] == 60


def test_run_flag_overrides(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert main(["run", cfg, "--out", str(tmp_path / "a"), "--seed", "3", "--policy", "round_robin",
                 "--mode", "pd_disaggregated", "--qps", "5"]) == EXIT_OK
    events = (tmp_path / "a" / "events.csv").read_text()
    assert "migration_start" in events


def test_run_env_output(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env_out"))
    assert main(["run", write(tmp_path, SMALL)]) == EXIT_OK
    assert (tmp_path / "env_out" / "summary.json").exists()


def test_run_bad_config_exits_2(tmp_path, capsys):
    assert main(["run", write(tmp_path, "model: 13B\n")]) == EXIT_CONFIG
    assert "cfg.yaml:1" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG


def test_run_deadline_exits_3(tmp_path):
    cfg = write(tmp_path, SMALL + "deadline_s: 0.5\n")
    assert main(["run", cfg, "--out", str(tmp_path / "o")]) == EXIT_STALL
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["deadline_hit"] and summary["violations"]["incomplete"] > 0


# -- sweep ---------------------------------------------------------------------------------------------

def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_sweep_counts_and_aggregates(tmp_path):
    cfg = write(tmp_path, SMALL)
    out = tmp_path / "sw"
    assert main(["sweep", cfg, "--qps-list", "5,10,20", "--seeds", "0,1,2", "--out", str(out)]) == EXIT_OK
    rows, agg = _rows(out / "sweep.csv"), _rows(out / "sweep_agg.csv")
    assert len(rows) == 18 and len(agg) == 6
    assert list(rows[0]) == ["qps", "seed", "policy", "attainment", "cost_units", "p50", "p95", "p99"]
    # Independent recomputation from the row file.
    for a in agg:
        members = [r for r in rows if r["qps"] == a["qps"] and r["policy"] == a["policy"]]
        for m in ("attainment", "cost_units", "p99"):
            values = [float(r[m]) for r in members]
            assert float(a[f"{m}_mean"]) == pytest.approx(statistics.fmean(values), rel=1e-12)
            assert float(a[f"{m}_std"]) == pytest.approx(statistics.stdev(values), rel=1e-12, abs=1e-15)


def test_sweep_single_cell_and_identical_seeds(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert main(["sweep", cfg, "--qps-list", "10", "--seeds", "4", "--policies", "slo_aware",
                 "--out", str(tmp_path / "one")]) == EXIT_OK
    assert len(_rows(tmp_path / "one" / "sweep.csv")) == 1
    assert main(["sweep", cfg, "--qps-list", "10", "--seeds", "4,4", "--policies", "round_robin",
                 "--out", str(tmp_path / "dup")]) == EXIT_OK
    agg = _rows(tmp_path / "dup" / "sweep_agg.csv")
    assert all(float(agg[0][f"{m}_std"]) == 0.0 for m in ("attainment", "cost_units", "p50", "p95", "p99"))


def test_sweep_parallel_matches_serial(tmp_path):
    cfg = write(tmp_path, SMALL)
    main(["sweep", cfg, "--qps-list", "5,20", "--seeds", "0,1", "--out", str(tmp_path / "s")])
    main(["sweep", cfg, "--qps-list", "5,20", "--seeds", "0,1", "--jobs", "2", "--out", str(tmp_path / "p")])
    assert (tmp_path / "s" / "sweep.csv").read_bytes() == (tmp_path / "p" / "sweep.csv").read_bytes()


def test_sweep_failure_keeps_partial_rows(tmp_path):
    # The second QPS value is invalid, so the grid aborts after the first cell's rows.
    cfg = write(tmp_path, SMALL)
    out = tmp_path / "bad"
    assert main(["sweep", cfg, "--qps-list", "10,-1", "--seeds", "0", "--out", str(out)]) == EXIT_STALL
    assert len(_rows(out / "sweep.csv")) == 2


# -- fit, compare, trace ---------------------------------------------------------------------------------

def test_fit_roundtrip(tmp_path):
    samples = str(tmp_path / "s.csv")
    assert main(["synth-profile", "--model", "32B", samples]) == EXIT_OK
    assert main(["fit", samples, "--out", str(tmp_path / "m.json")]) == EXIT_OK
    fitted = load_model(tmp_path / "m.json")
    truth = MODEL_PROFILES["32B"]
    for name in ("a", "b", "c", "a_prime", "b_prime", "c_prime"):
        assert getattr(fitted, name) == pytest.approx(getattr(truth, name), rel=1e-6)


def test_fit_noisy_reports_residual(tmp_path):
    samples = str(tmp_path / "s.csv")
    main(["synth-profile", "--noise", "0.01", "--seed", "0", samples])
    main(["fit", samples, "--out", str(tmp_path / "m.json")])
    data = json.loads((tmp_path / "m.json").read_text())
    assert 0 < data["diagnostics"]["max_rel_residual"] < 0.1


def test_fit_two_rows_exits_2(tmp_path):
    samples = tmp_path / "s.csv"
    main(["synth-profile", str(samples)])
    lines = samples.read_text().splitlines()
    samples.write_text("\n".join(lines[:3]) + "\n")
    assert main(["fit", str(samples), "--out", str(tmp_path / "m.json")]) == EXIT_CONFIG
    assert not (tmp_path / "m.json").exists()


def test_compare(tmp_path, capsys):
    cfg = write(tmp_path, SMALL)
    main(["run", cfg, "--out", str(tmp_path / "a")])
    main(["run", cfg, "--out", str(tmp_path / "b"), "--policy", "round_robin"])
    capsys.readouterr()
    assert main(["compare", str(tmp_path / "a" / "summary.json"), str(tmp_path / "a" / "summary.json")]) == EXIT_OK
    assert "identical" in capsys.readouterr().out
    main(["compare", str(tmp_path / "a" / "summary.json"), str(tmp_path / "b" / "summary.json")])
    assert "cost_units:" in capsys.readouterr().out


def test_trace_command(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["trace", write(tmp_path, SMALL), str(out)]) == EXIT_OK
    assert len(out.read_text().splitlines()) == 61
