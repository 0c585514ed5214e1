"""Run configuration: YAML schema, validation with line numbers, and simulator wiring.

Example::

    model: 7B
    mode: collocated
    dispatch_policy: slo_aware
    workers: 4
    workload:
      task_set: 4task
      qps: 20
      per_task_count: 300
      seed: 0
    scaler:
      enabled: true
      max_workers: 8
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .dispatcher import DispatcherConfig, RoundRobinDispatcher, SloAwareDispatcher
from .engine import KvLinkModel, RunResult, SimConfig, Simulator
from .latency import COEFFICIENTS, MODEL_PROFILES, LatencyModel, load_model
from .migrator import RoundRobinMigrator, SloAwareMigrator
from .priority import PriorityMapper
from .scaler import PROVISIONING_DELAYS, Scaler, ScalerConfig
from .workload import (
    Request, default_priority_bounds, generate, generate_phases, priority_task_set, ramp_workload, read_trace,
    task_set,
)

OUT_ENV = "MULTISLO_OUT"


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None, key: str | None = None):
        self.message = message
        self.line = line
        self.key = key
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass
class WorkloadConfig:
    task_set: str = "4task"
    priority_mode: bool = False
    qps: float = 10.0
    per_task_count: int = 300
    seed: int = 0
    phases: list | None = None  # [[start_s, end_s, qps], ...]
    ramp: dict | None = None  # {rate_per_client, stagger_s, end_s}
    trace: str | None = None
    priority_spread: float = 0.25


@dataclass
class ScalerSection:
    enabled: bool = False
    tau_s: float = 1.0
    eps_out: float = 1.2
    eps_in: float = 0.5
    min_workers: int | None = None
    max_workers: int | None = None
    scale_in_patience: int = 3
    provisioning_mode: str = "fast"
    provisioning_delays: dict | None = None
    fast_failure_prob: float = 0.0
    rate_window_s: float = 3.0


@dataclass
class PrioritySection:
    window_size: int = 50
    relax_lower_bound: bool = True


@dataclass
class KvLinkSection:
    base_latency_s: float = 0.005
    per_token_s: float = 1e-6


@dataclass
class RunConfig:
    model: Any = "7B"  # profile name, path to a fitted JSON, or a coefficient mapping
    estimate_model: Any = None
    mode: str = "collocated"
    dispatch_policy: str = "slo_aware"
    workers: int = 2
    prefill_workers: int = 1
    decode_workers: int = 1
    kv_capacity: int = 16384
    sync_interval_s: float = 0.1
    decision_latency_s: float = 0.0
    deadline_s: float | None = None
    theta: float = 0.5
    util_weight: float = 0.5
    poll_interval_s: float = 0.01
    output_dir: str = "out"
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    scaler: ScalerSection = field(default_factory=ScalerSection)
    priority: PrioritySection = field(default_factory=PrioritySection)
    kv_link: KvLinkSection = field(default_factory=KvLinkSection)

    def validate(self) -> None:
        if self.mode not in ("collocated", "pd_disaggregated"):
            raise ConfigError(f"mode must be collocated or pd_disaggregated, got {self.mode!r}", key="mode")
        if self.dispatch_policy not in ("slo_aware", "round_robin"):
            raise ConfigError(
                f"dispatch_policy must be slo_aware or round_robin, got {self.dispatch_policy!r}", key="dispatch_policy"
            )
        for key in ("workers", "prefill_workers", "decode_workers", "kv_capacity"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key=key)
        if not 0 <= self.theta <= 1:
            raise ConfigError("theta must be in [0, 1]", key="theta")
        for key in ("sync_interval_s", "poll_interval_s"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be > 0", key=key)
        resolve_model(self.model, key="model")
        if self.estimate_model is not None:
            resolve_model(self.estimate_model, key="estimate_model")
        try:
            task_set(self.workload.task_set)
        except KeyError as exc:
            raise ConfigError(str(exc).strip("'\""), key="workload.task_set") from None
        if self.workload.qps <= 0:
            raise ConfigError("workload.qps must be > 0", key="workload.qps")
        if self.workload.per_task_count < 1:
            raise ConfigError("workload.per_task_count must be >= 1", key="workload.per_task_count")
        if self.scaler.enabled:
            build_scaler_config(self)

    def with_overrides(self, **kw) -> "RunConfig":
        cfg = dataclasses.replace(self)
        cfg.workload = dataclasses.replace(self.workload)
        for key, value in kw.items():
            if value is None:
                continue
            if key == "qps":
                cfg.workload.qps = value
            elif key == "seed":
                cfg.workload.seed = value
            elif key == "policy":
                cfg.dispatch_policy = value
            elif key == "out":
                cfg.output_dir = value
            else:
                setattr(cfg, key, value)
        return cfg

    @property
    def initial_workers(self) -> int:
        return self.workers if self.mode == "collocated" else self.prefill_workers + self.decode_workers


_SECTIONS = {"workload": WorkloadConfig, "scaler": ScalerSection, "priority": PrioritySection, "kv_link": KvLinkSection}


def _check_type(value, annotation: str, name: str, source: str, line: int):
    ann = annotation.replace(" ", "")
    if value is None:
        if "None" in ann or ann == "Any":
            return None
        raise ConfigError(f"{name} must not be null", source, line)
    if ann == "Any":
        return value
    if ann.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true/false, got {value!r}", source, line)
        return value
    if ann.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}", source, line)
        return value
    if ann.startswith("float"):
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot (1e-6) as strings.
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}", source, line)
        return float(value)
    if ann.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string, got {value!r}", source, line)
        return value
    if ann.startswith("list"):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list", source, line)
        return value
    if ann.startswith("dict"):
        if not isinstance(value, dict):
            raise ConfigError(f"{name} must be a mapping", source, line)
        return value
    return value


def _build(cls, node: yaml.MappingNode, prefix: str, source: str, lines: dict[str, int]):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{prefix or 'config'} must be a mapping", source, node.start_mark.line + 1)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key_node, value_node in node.value:
        key = key_node.value
        line = key_node.start_mark.line + 1
        name = f"{prefix}{key}"
        if key not in fields:
            raise ConfigError(f"unknown key {name!r}", source, line)
        if key in kwargs:
            raise ConfigError(f"duplicate key {name!r}", source, line)
        lines[name] = line
        if prefix == "" and key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value_node, f"{key}.", source, lines)
            continue
        value = yaml.safe_load(yaml.serialize(value_node))
        kwargs[key] = _check_type(value, str(fields[key].type), name, source, value_node.start_mark.line + 1)
    return cls(**kwargs)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", source, mark.line + 1 if mark else None)
    lines: dict[str, int] = {}
    cfg = RunConfig() if node is None else _build(RunConfig, node, "", source, lines)
    try:
        cfg.validate()
    except ConfigError as exc:
        # Point at the offending key, or its section when the key was defaulted.
        line = lines.get(exc.key or "") or lines.get((exc.key or "").split(".")[0])
        raise ConfigError(exc.message, source, line, exc.key) from None
    return cfg


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(), str(path))


def resolve_model(source, key: str = "model") -> LatencyModel:
    if isinstance(source, LatencyModel):
        return source
    if isinstance(source, dict):
        try:
            return LatencyModel.from_dict(source)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{key} coefficients: {exc}", key=key) from None
    if isinstance(source, str):
        if source in MODEL_PROFILES:
            return MODEL_PROFILES[source]
        if source.endswith(".json"):
            try:
                return load_model(source)
            except (OSError, KeyError, ValueError) as exc:
                raise ConfigError(f"cannot load model {source!r}: {exc}", key=key) from None
    raise ConfigError(
        f"unknown model profile {source!r}; use one of {', '.join(MODEL_PROFILES)}, a fitted JSON path, "
        f"or a mapping of {', '.join(COEFFICIENTS)}",
        key=key,
    )


def model_name(cfg: RunConfig) -> str:
    return cfg.model if isinstance(cfg.model, str) and cfg.model in MODEL_PROFILES else "7B"


def build_scaler_config(cfg: RunConfig) -> ScalerConfig:
    s = cfg.scaler
    delays = {m: dict(d) for m, d in PROVISIONING_DELAYS.items()}
    for mode, table in (s.provisioning_delays or {}).items():
        delays.setdefault(mode, {}).update({k: float(v) for k, v in table.items()})
    try:
        return ScalerConfig(
            tau_s=s.tau_s, eps_out=s.eps_out, eps_in=s.eps_in,
            min_workers=s.min_workers if s.min_workers is not None else cfg.initial_workers,
            max_workers=s.max_workers if s.max_workers is not None else 2 * cfg.initial_workers,
            scale_in_patience=s.scale_in_patience, provisioning_mode=s.provisioning_mode,
            model=model_name(cfg), provisioning_delays=delays, fast_failure_prob=s.fast_failure_prob,
            rate_window_s=s.rate_window_s,
        )
    except ValueError as exc:
        raise ConfigError(f"scaler: {exc}", key="scaler") from None


def build_trace(cfg: RunConfig) -> list[Request]:
    w = cfg.workload
    bounds = default_priority_bounds(w.task_set, w.priority_spread) if w.priority_mode else None
    if w.trace:
        return read_trace(w.trace, bounds)
    tasks = priority_task_set(w.task_set) if w.priority_mode else task_set(w.task_set)
    if w.ramp is not None:
        return ramp_workload(tasks, seed=w.seed, priority_bounds=bounds, **w.ramp)
    if w.phases is not None:
        return generate_phases(tasks, [tuple(p) for p in w.phases], w.seed, bounds)
    return generate(tasks, w.per_task_count, w.qps, w.seed, bounds)


def build_simulation(cfg: RunConfig, trace: list[Request] | None = None) -> Simulator:
    if trace is None:
        trace = build_trace(cfg)
    oracle = resolve_model(cfg.model)
    estimate = resolve_model(cfg.estimate_model) if cfg.estimate_model is not None else None
    scaler = Scaler(build_scaler_config(cfg)) if cfg.scaler.enabled else None
    sim_cfg = SimConfig(
        mode=cfg.mode, workers=cfg.workers, prefill_workers=cfg.prefill_workers, decode_workers=cfg.decode_workers,
        max_workers=scaler.config.max_workers if scaler else None, kv_capacity=cfg.kv_capacity,
        kv_link=KvLinkModel(cfg.kv_link.base_latency_s, cfg.kv_link.per_token_s),
        sync_interval_s=cfg.sync_interval_s, decision_latency_s=cfg.decision_latency_s,
        deadline_s=cfg.deadline_s, seed=cfg.workload.seed,
    )
    priors = {t.name: t.output_len_mean for t in task_set(cfg.workload.task_set)}
    if cfg.dispatch_policy == "slo_aware":
        dispatcher = SloAwareDispatcher(
            DispatcherConfig(theta=cfg.theta, util_weight=cfg.util_weight, poll_interval_s=cfg.poll_interval_s), priors
        )
        migrator = SloAwareMigrator() if cfg.mode == "pd_disaggregated" else None
    else:
        dispatcher = RoundRobinDispatcher()
        migrator = RoundRobinMigrator() if cfg.mode == "pd_disaggregated" else None
    mapper = None
    if cfg.workload.priority_mode:
        bounds = default_priority_bounds(cfg.workload.task_set, cfg.workload.priority_spread)
        mapper = PriorityMapper(bounds, cfg.priority.window_size, cfg.priority.relax_lower_bound)
    return Simulator(sim_cfg, trace, oracle, dispatcher, migrator, scaler, mapper, estimate)


def output_dir(cfg: RunConfig, flag: str | None = None) -> Path:
    """``--out`` flag, then the environment override, then the config value."""
    return Path(flag or os.environ.get(OUT_ENV) or cfg.output_dir)


def run(cfg: RunConfig, trace: list[Request] | None = None) -> RunResult:
    return build_simulation(cfg, trace).run()
