from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

TASK_KINDS = ("affine_regression", "nonlinear_regression")


class EvaluationFault(RuntimeError):
    """Raised when a space considers a candidate's execution fatal."""


class NoCapacity(ValueError):
    """The candidate has no room left for a semantics-preserving insertion."""


class InvalidCandidate(ValueError):
    pass


@dataclass(frozen=True)
class FitnessRecord:
    fitness: float
    eval_cost: float
    evals: int = 1

    def __post_init__(self):
        if not math.isfinite(self.fitness):
            raise ValueError(f"fitness must be finite, got {self.fitness}")
        if self.evals < 1:
            raise ValueError("evals must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    n_train: int = 100
    n_valid: int = 20
    noise_sigma: float = 0.0
    c_eval: float = 1.0  # virtual seconds per example

    def __post_init__(self):
        if self.n_train < 0 or self.n_valid < 1:
            raise ValueError("need n_train >= 0 and n_valid >= 1")
        if self.noise_sigma < 0 or self.c_eval < 0:
            raise ValueError("noise_sigma and c_eval must be non-negative")

    @property
    def eval_cost(self) -> float:
        return self.c_eval * (self.n_train + self.n_valid)


def fitness_from_error(error: float) -> float:
    """Map a (possibly noisy) RMS error onto [0, 1]."""
    if not math.isfinite(error):
        return 0.0
    if error <= 0.0:
        return 1.0
    return min(1.0, max(0.0, 1.0 / (1.0 + error)))


def rms(errors: np.ndarray) -> float:
    if not len(errors):
        return 0.0
    return math.sqrt(math.fsum(e * e for e in errors.tolist()) / len(errors))


@dataclass(frozen=True)
class Task:
    """A synthetic regression task; the seed fixes ground truth and examples.

    ``affine_regression``: y = w.x + b with w, b ~ N(0, 1) drawn from the seed.
    ``nonlinear_regression``: y = x1 * x2 + x2, a fixed target.
    Inputs are N(0, 1) in both cases.
    """
    kind: str = "affine_regression"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")

    def with_seed(self, seed: int) -> Task:
        return Task(self.kind, seed)

    def parameters(self, dim: int) -> tuple[np.ndarray, float]:
        rng = np.random.default_rng([self.seed, dim, 0])
        return rng.standard_normal(dim), float(rng.standard_normal())

    def labels(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "affine_regression":
            w, b = self.parameters(x.shape[1])
            return x @ w + b
        if x.shape[1] < 2:
            raise ValueError("nonlinear_regression needs at least two inputs")
        return x[:, 0] * x[:, 1] + x[:, 1]

    def examples(self, split: str, n: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
        """Order-stable examples; a prefix of a longer request is identical."""
        return _examples(self, split, n, dim)

    @cached_property
    def eval_seed(self) -> int:
        """Seed for randomness inside an evaluation (e.g. weight init ops)."""
        return int(np.random.default_rng([self.seed, 7]).integers(0, 2**63))


@lru_cache(maxsize=256)
def _examples(task: Task, split: str, n: int, dim: int):
    stream = {"train": 1, "valid": 2}[split]
    rng = np.random.default_rng([task.seed, dim, stream])
    x = rng.standard_normal((n, dim))
    y = task.labels(x)
    x.setflags(write=False)
    y.setflags(write=False)
    return x, y
