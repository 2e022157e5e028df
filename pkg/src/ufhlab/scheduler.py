"""Virtual-time scheduling of proposals.

Time is simulated. A candidate occupies a worker for ``n_hashes * hash_cost``
plus its evaluation cost when an evaluation was needed. The serial scheduler is
the distributed one with a single worker.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

from ufhlab.metrics import TimeCourse

SCHEDULER_MODES = ("serial", "distributed")


class DomainError(ValueError):
    pass


class VirtualClock:
    def __init__(self, start: float = 0.0):
        self.now = start

    def advance_to(self, t: float) -> None:
        if t < self.now:
            raise ValueError(f"clock cannot go backwards ({t} < {self.now})")
        self.now = t


@dataclass
class CostModel:
    hash_cost: float = 10.0  # virtual seconds per hash

    def duration(self, work) -> float:
        t = work.hash_calls * self.hash_cost
        if work.evaluated:
            t += work.record.eval_cost
        return t


def run_distributed(controller, cost_model: CostModel | None = None, workers: int = 1,
                    budget: float = math.inf) -> TimeCourse:
    """Event-driven pool of ``workers`` workers.

    Each free worker takes a fresh proposal drawn from the population as it
    stands at that instant. Results are admitted in completion order (ties by
    proposal order). A result whose completion would pass ``budget`` is dropped
    and nothing further is started.
    """
    if workers < 1:
        raise ValueError("need at least one worker")
    cost_model = cost_model or CostModel()
    clock = VirtualClock()
    tc = TimeCourse(horizon=budget if math.isfinite(budget) else None)
    heap: list[tuple[float, int, object]] = []

    def start():
        if controller.done:
            return
        work = controller.propose()
        heapq.heappush(heap, (clock.now + cost_model.duration(work), work.step, work))

    for _ in range(workers):
        start()
    best = -math.inf
    while heap:
        t, _, work = heapq.heappop(heap)
        if t > budget:
            break
        clock.advance_to(t)
        adm = controller.admit(work, t)
        best = max(best, adm.fitness)
        tc.append(t, adm.step, best, adm.event, adm.population_best)
        start()
    if tc.horizon is None:
        tc.horizon = clock.now
    return tc


def run_serial(controller, cost_model: CostModel | None = None,
               budget: float = math.inf) -> TimeCourse:
    return run_distributed(controller, cost_model, 1, budget)


@dataclass
class Scheduler:
    mode: str = "serial"
    workers: int = 1
    budget: float = math.inf
    cost_model: CostModel = field(default_factory=CostModel)

    def __post_init__(self):
        if self.mode not in SCHEDULER_MODES:
            raise ValueError(f"mode must be one of {SCHEDULER_MODES}")
        if self.mode == "serial" and self.workers != 1:
            raise ValueError("serial mode uses exactly one worker")
        if self.workers < 1:
            raise ValueError("need at least one worker")
        if not self.budget > 0:
            raise ValueError("budget must be positive")

    def run(self, controller) -> TimeCourse:
        return run_distributed(controller, self.cost_model, self.workers, self.budget)


def predicted_speedup(N_E: float, N_S: float, N_T: float, h: float) -> float:
    """Evaluation-time speedup of FEC when hashes cost N_E*N_S examples each.

    N_E examples per seed, N_S seeds, N_T examples per full evaluation, hit
    fraction h.
    """
    if N_E < 0 or N_S < 0 or N_T <= 0 or not 0.0 <= h <= 1.0:
        raise DomainError(f"invalid arguments N_E={N_E}, N_S={N_S}, N_T={N_T}, h={h}")
    denom = N_E * N_S + (1.0 - h) * N_T
    if denom <= 0:
        raise DomainError("speedup is unbounded (free hashing and h = 1)")
    return N_T / denom
