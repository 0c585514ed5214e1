"""Analytical prefill/decode latency model, profiling grid and least-squares fitting.

The same :class:`LatencyModel` type serves two purposes in a simulation: the
*oracle* that decides how long a step really takes, and the *estimate* the
schedulers use for their predictions.  By default both are the same instance.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

COEFFICIENTS = ("a", "b", "c", "a_prime", "b_prime", "c_prime")

PROFILE_BATCH_SIZES = (1, 2, 4, 8, 16, 32, 64, 96, 128, 160, 192)
PROFILE_INPUT_LENGTHS = (4, 8, 16, 32, 48, 64, 96, 128, 192, 256, 284, 512, 768, 1024, 1536, 2020)

SAMPLES_HEADER = ("batch_size", "input_lengths", "prefill_s", "decode_step_s")


class FitUnderdetermined(ValueError):
    """Raised when a profile sample set cannot identify all coefficients of a phase."""

    def __init__(self, phase: str, rank: int, needed: int = 3):
        self.phase = phase
        super().__init__(f"{phase} fit underdetermined: rank {rank} < {needed} (need >= 3 independent samples)")


@dataclass(frozen=True)
class LatencyModel:
    """Coefficients for prefill ``a + b*sum(l) + c*sum(l^2)`` and decode ``a' + b'*sum(l_cur) + c'*B``."""

    a: float
    b: float
    c: float
    a_prime: float
    b_prime: float
    c_prime: float

    def __post_init__(self):
        for name in COEFFICIENTS:
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"coefficient {name} must be finite, got {value}")
            if value < 0:
                raise ValueError(f"coefficient {name} must be >= 0, got {value}")

    def predict_prefill(self, input_lengths: Sequence[int]) -> float:
        return predict_prefill(self, input_lengths)

    def predict_decode_step(self, current_lengths: Sequence[int]) -> float:
        return predict_decode_step(self, current_lengths)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LatencyModel":
        missing = [k for k in COEFFICIENTS if k not in data]
        if missing:
            raise KeyError(f"latency model missing coefficients: {', '.join(missing)}")
        return cls(**{k: float(data[k]) for k in COEFFICIENTS})


# Synthetic, hand-picked coefficients with plausible relative magnitudes.  They
# are not measurements; real coefficients come from ``multislo fit``.
MODEL_PROFILES: dict[str, LatencyModel] = {
    "7B": LatencyModel(a=0.015, b=8e-5, c=2e-8, a_prime=0.012, b_prime=2e-6, c_prime=4e-4),
    "32B": LatencyModel(a=0.04, b=2.4e-4, c=5e-8, a_prime=0.03, b_prime=6e-6, c_prime=1.2e-3),
    "70B": LatencyModel(a=0.05, b=3e-4, c=6e-8, a_prime=0.04, b_prime=8e-6, c_prime=1.5e-3),
}


def predict_prefill(model: LatencyModel, input_lengths: Sequence[int]) -> float:
    if len(input_lengths) == 0:
        raise ValueError("predict_prefill: empty batch")
    total = 0
    total_sq = 0
    for length in input_lengths:
        if length < 1:
            raise ValueError(f"predict_prefill: input length must be >= 1, got {length}")
        total += length
        total_sq += length * length
    return model.a + model.b * total + model.c * total_sq


def predict_decode_step(model: LatencyModel, current_lengths: Sequence[int]) -> float:
    if len(current_lengths) == 0:
        raise ValueError("predict_decode_step: empty batch")
    return model.a_prime + model.b_prime * sum(current_lengths) + model.c_prime * len(current_lengths)


@dataclass(frozen=True)
class ProfileSample:
    batch_size: int
    input_lengths: tuple[int, ...]
    prefill_time: float
    decode_step_time: float

    def __post_init__(self):
        object.__setattr__(self, "input_lengths", tuple(int(x) for x in self.input_lengths))
        if self.batch_size != len(self.input_lengths):
            raise ValueError(f"batch_size {self.batch_size} != {len(self.input_lengths)} input lengths")
        if any(x < 1 for x in self.input_lengths):
            raise ValueError("input lengths must be >= 1")
        if not (self.prefill_time > 0 and self.decode_step_time > 0):
            raise ValueError("profile times must be > 0")


@dataclass
class FitResult:
    model: LatencyModel
    max_rel_residual_prefill: float
    max_rel_residual_decode: float
    n_samples: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = self.model.to_dict()
        out["diagnostics"] = {
            "n_samples": self.n_samples,
            "max_rel_residual_prefill": self.max_rel_residual_prefill,
            "max_rel_residual_decode": self.max_rel_residual_decode,
            "max_rel_residual": max(self.max_rel_residual_prefill, self.max_rel_residual_decode),
            "warnings": list(self.notes),
        }
        return out


def profiling_grid() -> list[tuple[int, int]]:
    return list(itertools.product(PROFILE_BATCH_SIZES, PROFILE_INPUT_LENGTHS))


def synthesize_samples(
    model: LatencyModel,
    grid: Iterable[tuple[int, int]] | None = None,
    noise: float = 0.0,
    seed: int = 0,
) -> list[ProfileSample]:
    """Generate profile samples from ``model`` with optional multiplicative Gaussian noise."""
    rng = np.random.default_rng(seed)
    samples = []
    for batch_size, length in grid if grid is not None else profiling_grid():
        lengths = (length,) * batch_size
        tp = predict_prefill(model, lengths)
        td = predict_decode_step(model, lengths)
        if noise:
            tp *= 1.0 + noise * rng.standard_normal()
            td *= 1.0 + noise * rng.standard_normal()
        samples.append(ProfileSample(batch_size, lengths, tp, td))
    return samples


def _weighted_solve(features: np.ndarray, observed: np.ndarray, phase: str) -> np.ndarray:
    # Minimizing sum(((X @ w - y) / y)^2) is ordinary least squares on rows scaled by 1/y.
    design = features / observed[:, None]
    scale = np.abs(design).max(axis=0)
    scale[scale == 0] = 1.0
    design = design / scale
    rank = np.linalg.matrix_rank(design)
    if rank < features.shape[1]:
        raise FitUnderdetermined(phase, int(rank))
    coef, *_ = np.linalg.lstsq(design, np.ones_like(observed), rcond=None)
    return coef / scale


def fit(samples: Sequence[ProfileSample]) -> FitResult:
    """Fit all six coefficients by minimizing total squared relative error, per phase."""
    if len(samples) < 3:
        raise FitUnderdetermined("prefill", len(samples))
    sums = np.array([float(sum(s.input_lengths)) for s in samples])
    sq_sums = np.array([float(sum(x * x for x in s.input_lengths)) for s in samples])
    batch = np.array([float(s.batch_size) for s in samples])
    ones = np.ones(len(samples))
    tp = np.array([s.prefill_time for s in samples])
    td = np.array([s.decode_step_time for s in samples])

    prefill_coef = _weighted_solve(np.column_stack([ones, sums, sq_sums]), tp, "prefill")
    decode_coef = _weighted_solve(np.column_stack([ones, sums, batch]), td, "decode")

    notes = []
    values = dict(zip(COEFFICIENTS, [*prefill_coef, *decode_coef]))
    for name, value in values.items():
        if value < 0:
            notes.append(f"coefficient {name} fitted negative ({value:.3e}); clamped to 0")
            values[name] = 0.0
    for note in notes:
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    model = LatencyModel(**{k: float(v) for k, v in values.items()})

    pred_p = np.array([predict_prefill(model, s.input_lengths) for s in samples])
    pred_d = np.array([predict_decode_step(model, s.input_lengths) for s in samples])
    return FitResult(
        model=model,
        max_rel_residual_prefill=float(np.max(np.abs(pred_p - tp) / tp)),
        max_rel_residual_decode=float(np.max(np.abs(pred_d - td) / td)),
        n_samples=len(samples),
        notes=notes,
    )


def write_samples(path: str | Path, samples: Iterable[ProfileSample]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SAMPLES_HEADER)
        for s in samples:
            writer.writerow(
                [s.batch_size, ";".join(str(x) for x in s.input_lengths), repr(s.prefill_time), repr(s.decode_step_time)]
            )


def read_samples(path: str | Path) -> list[ProfileSample]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SAMPLES_HEADER:
            raise ValueError(f"{path}: expected header {','.join(SAMPLES_HEADER)}, got {reader.fieldnames}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                lengths = tuple(int(x) for x in row["input_lengths"].split(";") if x)
                out.append(
                    ProfileSample(int(row["batch_size"]), lengths, float(row["prefill_s"]), float(row["decode_step_s"]))
                )
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def save_model(path: str | Path, model: LatencyModel | FitResult) -> None:
    data = model.to_dict()
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_model(path: str | Path) -> LatencyModel:
    return LatencyModel.from_dict(json.loads(Path(path).read_text()))
