"""Time-courses, AUC, run summaries, counterfactual collision checks and sweep statistics."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, replace
from typing import Hashable, Iterable, Mapping, NamedTuple, Sequence

TIMECOURSE_COLUMNS = ("virtual_time_s", "step", "best_fitness", "event", "population_best")
SCATTER_FIELDS = ("config_id", "seed", "auc", "hit_fraction", "collision_rate")


class EmptyTimeCourse(ValueError):
    pass


class InsufficientRuns(ValueError):
    pass


class Sample(NamedTuple):
    time: float
    step: int
    best_fitness: float
    event: str = "eval"
    population_best: float = math.nan


@dataclass
class TimeCourse:
    """Best-so-far fitness at every admission, in virtual seconds.

    ``horizon`` is the normalizing time T for :func:`auc`; a budgeted run sets
    it to the budget, an unbudgeted one to its final clock.
    """
    samples: list[Sample] = field(default_factory=list)
    horizon: float | None = None

    def append(self, time: float, step: int, best_fitness: float, event: str = "eval",
               population_best: float = math.nan) -> None:
        self.samples.append(Sample(time, step, best_fitness, event, population_best))

    def __len__(self):
        return len(self.samples)

    @property
    def times(self) -> list[float]:
        return [s.time for s in self.samples]

    @property
    def fitnesses(self) -> list[float]:
        return [s.best_fitness for s in self.samples]

    @property
    def final_time(self) -> float:
        return self.samples[-1].time if self.samples else 0.0

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMECOURSE_COLUMNS)
        for s in self.samples:
            w.writerow([repr(float(s.time)), s.step, repr(float(s.best_fitness)), s.event,
                        repr(float(s.population_best))])

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, horizon: float | None = None) -> TimeCourse:
        tc = cls(horizon=horizon)
        for row in csv.DictReader(io.StringIO(text)):
            tc.append(float(row["virtual_time_s"]), int(row["step"]), float(row["best_fitness"]),
                      row["event"], float(row.get("population_best") or math.nan))
        return tc


def auc(timecourse: TimeCourse, horizon: float | None = None) -> float:
    """(1/T) * integral over [0, T] of the best-so-far step function.

    The curve is 0 before the first sample and holds each value until the next
    sample; samples past T are ignored.
    """
    if not timecourse.samples:
        raise EmptyTimeCourse("time-course has no samples")
    T = horizon if horizon is not None else timecourse.horizon
    if T is None:
        T = timecourse.final_time
    if not T > 0:
        raise ValueError(f"horizon must be positive, got {T}")
    samples = timecourse.samples
    total = 0.0
    for i, s in enumerate(samples):
        start = min(s.time, T)
        end = min(samples[i + 1].time, T) if i + 1 < len(samples) else T
        if end > start:
            total += s.best_fitness * (end - start)
    return total / T


@dataclass
class ExperimentSummary:
    seed: int
    technique: str
    auc: float
    hit_fraction: float
    collision_rate: float
    eval_calls: int
    hash_calls: int
    best_fitness: float
    final_fitness: float
    meta_validation_fitness: float
    admitted: int
    final_clock: float
    hits: int = 0
    misses: int = 0
    forgets: int = 0
    collisions: int = 0

    @property
    def miss_fraction(self) -> float:
        n = self.hits + self.misses
        return self.misses / n if n else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def hit_fraction(counters: Mapping) -> float:
    n = counters["hits"] + counters["misses"]
    return counters["hits"] / n if n else 0.0


def collision_rate(counters: Mapping) -> float:
    return counters["collisions"] / counters["hits"] if counters["hits"] else 0.0


def summarize(result, meta_task=None) -> ExperimentSummary:
    """Build the summary of a finished run (a :class:`ufhlab.evolution.RunResult`).

    ``final_fitness`` is a fresh noise-free re-evaluation of the best candidate on
    the search task; ``meta_validation_fitness`` does the same on ``meta_task``.
    """
    search = result.search
    counters = result.counters
    clean = replace(search.eval_config, noise_sigma=0.0)
    best = result.best.candidate
    final = search.space.evaluate(best, search.task, clean).fitness
    meta = final
    if meta_task is not None:
        meta = search.space.evaluate(best, meta_task, clean).fitness
    tc = result.timecourse
    return ExperimentSummary(
        seed=search.config.seed,
        technique=search.config.technique,
        auc=auc(tc) if tc.samples and (tc.horizon or tc.final_time) > 0 else 0.0,
        hit_fraction=hit_fraction(counters),
        collision_rate=collision_rate(counters),
        eval_calls=counters["eval_calls"],
        hash_calls=counters["hash_calls"],
        best_fitness=result.best.fitness,
        final_fitness=final,
        meta_validation_fitness=meta,
        admitted=counters["admitted"],
        final_clock=tc.final_time,
        hits=counters["hits"],
        misses=counters["misses"],
        forgets=counters["forgets"],
        collisions=counters["collisions"],
    )


@dataclass
class CollisionReport:
    hits: int
    collisions: int
    collision_rate: float
    counterfactual_calls: int
    tolerance: float
    m_bits: int
    eval_calls: int

    def to_dict(self) -> dict:
        return asdict(self)


def run_counterfactual(space, task, config, scheduler=None, tolerance: float = 1e-9, **kwargs):
    """Run FEC while re-evaluating every hit to count hash collisions.

    The search keeps using the cached values, so its dynamics are those of FEC.
    Returns ``(CollisionReport, RunResult)``.
    """
    from ufhlab.evolution import ConfigError, run_regularized_evolution

    if config.technique != "fec":
        raise ConfigError("counterfactual runs require technique 'fec'")
    if tolerance < 0:
        raise ConfigError("tolerance must be non-negative")
    result = run_regularized_evolution(space, task, config, scheduler,
                                       counterfactual_tolerance=tolerance, **kwargs)
    c = result.counters
    report = CollisionReport(c["hits"], c["collisions"], collision_rate(c),
                             c["counterfactual_calls"], tolerance,
                             result.search.hash_config.m_bits, c["eval_calls"])
    return report, result


class Aggregate(NamedTuple):
    mean: float
    sem: float
    n: int


def mean_sem(values: Sequence[float]) -> Aggregate:
    if len(values) < 2:
        raise InsufficientRuns(f"need at least 2 runs, got {len(values)}")
    values = [float(v) for v in values]
    return Aggregate(statistics.fmean(values), statistics.stdev(values) / math.sqrt(len(values)),
                     len(values))


def sweep_aggregate(groups: Mapping[Hashable, Sequence[float]]) -> dict[Hashable, Aggregate]:
    """Mean and standard error of the mean for every group."""
    return {key: mean_sem(values) for key, values in groups.items()}


def paired_rows(aggregates: Mapping[tuple, Aggregate], baseline: str = "none") -> list[dict]:
    """Pair each technique's mean AUC with the baseline at the same point.

    Keys of ``aggregates`` are ``(point_id, technique)``.
    """
    rows = []
    for (point, technique), agg in aggregates.items():
        if technique == baseline or (point, baseline) not in aggregates:
            continue
        base = aggregates[(point, baseline)]
        rows.append({"config_id": point, "technique": technique,
                     "baseline_auc": base.mean, "baseline_sem": base.sem,
                     "technique_auc": agg.mean, "technique_sem": agg.sem, "n": agg.n})
    return rows


def write_jsonl(fh, records: Iterable[Mapping]) -> None:
    for r in records:
        fh.write(json.dumps(r, sort_keys=True) + "\n")


def write_csv(fh, rows: Sequence[Mapping], columns: Sequence[str]) -> None:
    w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
