"""Deterministic simulator and scheduling policies for LLM serving with per-request latency SLOs."""

from .engine import KvLinkModel, Role, RunResult, SimConfig, SimulationStall, Simulator
from .latency import MODEL_PROFILES, LatencyModel, fit, predict_decode_step, predict_prefill
from .workload import Request, SloSpec, TaskSpec, builtin_task_sets, generate

__version__ = "0.1.0"

__all__ = [
    "KvLinkModel", "LatencyModel", "MODEL_PROFILES", "Request", "Role", "RunResult", "SimConfig",
    "SimulationStall", "Simulator", "SloSpec", "TaskSpec", "builtin_task_sets", "fit", "generate",
    "predict_decode_step", "predict_prefill",
]
