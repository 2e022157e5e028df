"""Evolutionary controllers and the hash-based search techniques.

The controller (:class:`Search`) is split into ``propose`` and ``admit`` so a
scheduler can interleave several in-flight candidates. ``propose`` draws the
next candidate, hashes it when the technique needs to, consults the cache and
runs the evaluation if one is required; ``admit`` commits the result to the
cache and the population. In serial mode the two calls alternate, which is
exactly the textbook loop.
"""

from __future__ import annotations

import math
import random
import threading
from collections import OrderedDict, defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import Any, Callable, NamedTuple

from ufhlab.hashing import HashConfig, HashCounters, hash_hex, unified_functional_hash
from ufhlab.spaces.base import EvalConfig, FitnessRecord, Task

TECHNIQUES = ("none", "fec", "fec_forgetful", "fea", "fcm", "tabulist")
CACHING_TECHNIQUES = ("fec", "fec_forgetful", "fea")


class ConfigError(ValueError):
    """A configuration violates a documented constraint."""


class PopulationTooSmall(ValueError):
    pass


@dataclass
class EvolutionConfig:
    population_size: int = 100
    tournament_size: int = 10
    n_candidates: int = 1000
    technique: str = "none"
    forget_prob: float = 0.1
    max_evals: int = 10
    tabulist_k: float = 3
    max_retry: int = 32
    cache_capacity: int = 1_000_000
    seed: int = 0

    def validate(self) -> None:
        P, T, N = self.population_size, self.tournament_size, self.n_candidates
        if not 1 <= T <= P <= N:
            raise ConfigError(f"need 1 <= tournament_size <= population_size <= n_candidates, "
                              f"got T={T}, P={P}, N={N}")
        if self.technique not in TECHNIQUES:
            raise ConfigError(f"technique must be one of {TECHNIQUES}, got {self.technique!r}")
        if not 0.0 <= self.forget_prob <= 1.0:
            raise ConfigError(f"forget_prob must be in [0, 1], got {self.forget_prob}")
        if self.max_evals < 1:
            raise ConfigError(f"max_evals must be >= 1, got {self.max_evals}")
        if self.tabulist_k < 1:
            raise ConfigError(f"tabulist_k must be >= 1, got {self.tabulist_k}")
        if self.max_retry < 1:
            raise ConfigError(f"max_retry must be >= 1, got {self.max_retry}")
        if self.cache_capacity < 1:
            raise ConfigError(f"cache_capacity must be >= 1, got {self.cache_capacity}")


@dataclass(eq=False)
class Individual:
    candidate: Any
    record: FitnessRecord
    index: int
    key: int | None = None

    @property
    def fitness(self) -> float:
        return self.record.fitness


def _rank(ind: Individual):
    return (ind.fitness, ind.index)


class Population:
    """FIFO (regularized) or remove-worst (elitist) population of bounded size."""

    def __init__(self, capacity: int, elitist: bool = False):
        self.capacity = capacity
        self.elitist = elitist
        self._members: deque[Individual] = deque()

    def add(self, ind: Individual) -> Individual | None:
        """Insert ``ind``; return whoever was removed to respect the capacity."""
        self._members.append(ind)
        if len(self._members) <= self.capacity:
            return None
        if not self.elitist:
            return self._members.popleft()
        # Lowest fitness leaves; among equals the oldest goes first.
        worst = min(self._members, key=lambda m: (m.fitness, m.index))
        self._members.remove(worst)
        return worst

    def best(self) -> Individual:
        return max(self._members, key=_rank)

    def __len__(self):
        return len(self._members)

    def __getitem__(self, i) -> Individual:
        return self._members[i]

    def __iter__(self):
        return iter(self._members)


def select_parent(population: Population, T: int, rng: random.Random) -> Individual:
    """Tournament of ``T`` distinct members; best fitness wins, newest breaks ties."""
    n = len(population)
    if n < T:
        raise PopulationTooSmall(f"tournament of {T} from a population of {n}")
    picks = rng.sample(range(n), T)
    return max((population[i] for i in picks), key=_rank)


class Cache:
    """Hash -> FitnessRecord map with least-recently-inserted eviction."""

    def __init__(self, capacity: int = 1_000_000):
        self.capacity = capacity
        self._data: OrderedDict[int, FitnessRecord] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.collisions = 0
        self.forgets = 0
        self.evictions = 0

    def lookup(self, key: int) -> FitnessRecord | None:
        """Counted lookup: a present key is a hit, an absent one a miss."""
        with self._lock:
            rec = self._data.get(key)
            if rec is None:
                self.misses += 1
            else:
                self.hits += 1
            return rec

    def get(self, key: int) -> FitnessRecord | None:
        return self._data.get(key)

    def count(self, hit: bool) -> None:
        with self._lock:
            if hit:
                self.hits += 1
            else:
                self.misses += 1

    def put(self, key: int, record: FitnessRecord) -> None:
        with self._lock:
            if key in self._data:
                self._data[key] = record  # an update keeps the insertion slot
                return
            self._data[key] = record
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)
                self.evictions += 1

    def forget(self, key: int) -> None:
        with self._lock:
            if self._data.pop(key, None) is not None:
                self.forgets += 1

    def record_collision(self) -> None:
        with self._lock:
            self.collisions += 1

    def __contains__(self, key):
        return key in self._data

    def __len__(self):
        return len(self._data)


class Tabulist:
    """Per-hash seen counter."""

    def __init__(self):
        self._counts: defaultdict[int, int] = defaultdict(int)
        self._lock = threading.Lock()

    def __getitem__(self, key: int) -> int:
        return self._counts.get(key, 0)

    def increment(self, key: int) -> int:
        with self._lock:
            self._counts[key] += 1
            return self._counts[key]

    def total(self) -> int:
        return sum(self._counts.values())

    def __len__(self):
        return len(self._counts)


# -- acquisition policies --------------------------------------------------
#
# lookup(key) -> (record or None, cache event); None means "evaluate".
# commit(key, fresh) -> the record the population should see.


class PlainPolicy:
    uses_hash = False

    def lookup(self, key):
        return None, "eval"

    def commit(self, key, fresh: FitnessRecord) -> FitnessRecord:
        return fresh


class FECPolicy:
    uses_hash = True

    def __init__(self, cache: Cache):
        self.cache = cache

    def lookup(self, key):
        rec = self.cache.lookup(key)
        return rec, ("miss" if rec is None else "hit")

    def commit(self, key, fresh: FitnessRecord) -> FitnessRecord:
        self.cache.put(key, fresh)
        return fresh


class ForgetfulFECPolicy(FECPolicy):
    def __init__(self, cache: Cache, forget_prob: float, rng: random.Random):
        super().__init__(cache)
        self.forget_prob = forget_prob
        self.rng = rng

    def lookup(self, key):
        rec = self.cache.lookup(key)
        if rec is None:
            return None, "miss"
        if self.rng.random() < self.forget_prob:
            self.cache.forget(key)
            return rec, "forget"
        return rec, "hit"


class FEAPolicy(FECPolicy):
    """Keep a running mean of up to ``max_evals`` evaluations per hash."""

    def __init__(self, cache: Cache, max_evals: int):
        super().__init__(cache)
        self.max_evals = max_evals

    def lookup(self, key):
        rec = self.cache.get(key)
        if rec is not None and rec.evals >= self.max_evals:
            self.cache.count(hit=True)
            return rec, "hit"
        self.cache.count(hit=False)
        return None, "miss"

    def commit(self, key, fresh: FitnessRecord) -> FitnessRecord:
        rec = self.cache.get(key)
        if rec is None:
            self.cache.put(key, fresh)
            return fresh
        if rec.evals >= self.max_evals:
            return rec
        n = rec.evals + 1
        updated = replace(rec, fitness=rec.fitness + (fresh.fitness - rec.fitness) / n, evals=n)
        self.cache.put(key, updated)
        return updated


def _acquire(policy, child, hash_fn, evaluate) -> FitnessRecord:
    key = hash_fn(child)
    rec, _ = policy.lookup(key)
    if rec is not None:
        return rec
    return policy.commit(key, evaluate(child))


def acquire_fec(child, cache: Cache, hash_fn: Callable, evaluate: Callable) -> FitnessRecord:
    """Return the cached fitness for ``child``'s hash, evaluating only on a miss."""
    return _acquire(FECPolicy(cache), child, hash_fn, evaluate)


def acquire_fec_forgetful(child, cache: Cache, hash_fn: Callable, evaluate: Callable,
                          forget_prob: float, rng: random.Random) -> FitnessRecord:
    return _acquire(ForgetfulFECPolicy(cache, forget_prob, rng), child, hash_fn, evaluate)


def acquire_fea(child, cache: Cache, hash_fn: Callable, evaluate: Callable,
                max_evals: int) -> FitnessRecord:
    return _acquire(FEAPolicy(cache, max_evals), child, hash_fn, evaluate)


def mutate_fcm(parent, space, rng: random.Random, max_retry: int, hash_fn: Callable,
               parent_hash: int | None = None):
    """Mutate, then keep stacking mutations while the child still hashes like the parent.

    At most ``max_retry`` mutations in total; when the cap is hit the child is
    returned as it stands.
    """
    child = space.mutate(parent, rng)
    applied = 1
    if applied >= max_retry:
        return child
    if parent_hash is None:
        parent_hash = hash_fn(parent)
    while applied < max_retry and hash_fn(child) == parent_hash:
        child = space.mutate(child, rng)
        applied += 1
    return child


def gate_tabulist(child, tabulist: Tabulist, space, rng: random.Random, K: float,
                  max_retry: int, hash_fn: Callable):
    """Mutate ``child`` further while its hash has been seen ``K`` or more times."""
    key = hash_fn(child)
    tries = 0
    while tabulist[key] >= K and tries < max_retry:
        child = space.mutate(child, rng)
        key = hash_fn(child)
        tries += 1
    tabulist.increment(key)
    return child


# -- controller ----------------------------------------------------------------


@dataclass
class Work:
    """One proposed candidate on its way to the population."""
    step: int
    candidate: Any
    record: FitnessRecord
    key: int | None
    evaluated: bool
    hash_calls: int
    event: str
    warmup: bool


class Admission(NamedTuple):
    step: int
    fitness: float
    event: str
    population_best: float


@dataclass
class Counters:
    eval_calls: int = 0
    counterfactual_calls: int = 0
    mutations: int = 0


class Search:
    """Regularized evolution (FIFO) or classic tournament (elitist) controller."""

    def __init__(self, space, task: Task, config: EvolutionConfig, *,
                 hash_config: HashConfig | None = None, eval_config: EvalConfig | None = None,
                 elitist: bool = False, counterfactual_tolerance: float | None = None):
        config.validate()
        self.space = space
        self.task = task
        self.config = config
        self.hash_config = hash_config or HashConfig()
        self.eval_config = eval_config or EvalConfig()
        self.elitist = elitist
        self.counterfactual_tolerance = counterfactual_tolerance

        seed = config.seed
        self.rng = random.Random(f"search:{seed}")
        self.noise_rng = random.Random(f"noise:{seed}")
        self.forget_rng = random.Random(f"forget:{seed}")
        self.counterfactual_rng = random.Random(f"counterfactual:{seed}")

        self.population = Population(config.population_size, elitist=elitist)
        self.cache: Cache | None = None
        self.tabulist: Tabulist | None = None
        technique = config.technique
        if technique in CACHING_TECHNIQUES:
            self.cache = Cache(config.cache_capacity)
        if technique == "fec":
            self.policy = FECPolicy(self.cache)
        elif technique == "fec_forgetful":
            self.policy = ForgetfulFECPolicy(self.cache, config.forget_prob, self.forget_rng)
        elif technique == "fea":
            self.policy = FEAPolicy(self.cache, config.max_evals)
        else:
            self.policy = PlainPolicy()
        if technique == "tabulist":
            self.tabulist = Tabulist()
        if counterfactual_tolerance is not None and technique != "fec":
            raise ConfigError("counterfactual runs require technique 'fec'")

        self.hash_counters = HashCounters()
        self.counters = Counters()
        self.events: list[dict] = []
        self.n_proposed = 0
        self.n_admitted = 0
        self.best_so_far = -math.inf
        self._memo = (None, None)

    @property
    def done(self) -> bool:
        return self.n_proposed >= self.config.n_candidates

    def hash(self, candidate) -> int:
        # One-entry memo: FCM/tabulist loops already hashed the final child.
        if candidate is self._memo[0]:
            return self._memo[1]
        key = unified_functional_hash(candidate, self.space, self.hash_config, task=self.task,
                                      counters=self.hash_counters)
        self._memo = (candidate, key)
        return key

    def evaluate(self, candidate, rng: random.Random | None = None) -> FitnessRecord:
        self.counters.eval_calls += 1
        return self.space.evaluate(candidate, self.task, self.eval_config, rng or self.noise_rng)

    def _mutate(self, candidate):
        self.counters.mutations += 1
        return self.space.mutate(candidate, self.rng)

    def _draw(self):
        """Return (child, warmup flag)."""
        cfg = self.config
        if self.n_proposed < cfg.population_size or len(self.population) < cfg.tournament_size:
            child = self.space.random_candidate(self.rng)
            if self.tabulist is not None:
                self.tabulist.increment(self.hash(child))
            return child, True
        parent = select_parent(self.population, cfg.tournament_size, self.rng)
        space = _CountingSpace(self)
        if cfg.technique == "fcm":
            if parent.key is None:
                parent.key = self.hash(parent.candidate)
            child = mutate_fcm(parent.candidate, space, self.rng, cfg.max_retry, self.hash,
                               parent_hash=parent.key)
        else:
            child = self._mutate(parent.candidate)
            if self.tabulist is not None:
                child = gate_tabulist(child, self.tabulist, space, self.rng, cfg.tabulist_k,
                                      cfg.max_retry, self.hash)
        return child, False

    def propose(self) -> Work:
        step = self.n_proposed
        hashes_before = self.hash_counters.hashes
        child, warmup = self._draw()
        self.n_proposed += 1
        key = None
        if self.policy.uses_hash:
            key = self.hash(child)
        elif self._memo[0] is child:
            key = self._memo[1]
        record, event = self.policy.lookup(key)
        evaluated = record is None
        if evaluated:
            record = self.evaluate(child)
        elif self.counterfactual_tolerance is not None:
            self.counters.counterfactual_calls += 1
            fresh = self.space.evaluate(child, self.task, self.eval_config, self.counterfactual_rng)
            if abs(fresh.fitness - record.fitness) > self.counterfactual_tolerance:
                self.cache.record_collision()
            event = "collision-check"
        return Work(step, child, record, key, evaluated,
                    self.hash_counters.hashes - hashes_before, event, warmup)

    def admit(self, work: Work, now: float) -> Admission:
        record = self.policy.commit(work.key, work.record) if work.evaluated else work.record
        ind = Individual(work.candidate, record, self.n_admitted, work.key)
        self.population.add(ind)
        self.n_admitted += 1
        self.best_so_far = max(self.best_so_far, record.fitness)
        self.events.append({
            "step": work.step,
            "virtual_time": now,
            "hash": None if work.key is None else hash_hex(work.key),
            "fitness": record.fitness,
            "cache_event": work.event,
            "evaluator_calls": self.counters.eval_calls,
        })
        return Admission(work.step, record.fitness, work.event, self.population.best().fitness)

    def best(self) -> Individual:
        return self.population.best()

    def counter_summary(self) -> dict:
        c = self.cache
        out = {
            "proposed": self.n_proposed,
            "admitted": self.n_admitted,
            "eval_calls": self.counters.eval_calls,
            "hash_calls": self.hash_counters.hashes,
            "hash_forward_passes": self.hash_counters.forward_passes,
            "hash_backward_passes": self.hash_counters.backward_passes,
            "mutations": self.counters.mutations,
            "counterfactual_calls": self.counters.counterfactual_calls,
            "hits": c.hits if c else 0,
            "misses": c.misses if c else 0,
            "forgets": c.forgets if c else 0,
            "collisions": c.collisions if c else 0,
            "evictions": c.evictions if c else 0,
        }
        if self.tabulist is not None:
            out["tabulist_total"] = self.tabulist.total()
        return out


class _CountingSpace:
    """Routes the FCM/tabulist retry mutations through the controller's counter."""

    def __init__(self, search: Search):
        self._search = search

    def mutate(self, candidate, rng):
        return self._search._mutate(candidate)


@dataclass
class RunResult:
    best: Individual
    timecourse: Any
    counters: dict
    search: Search = field(repr=False)


def _run(space, task, config, scheduler, elitist, **kwargs) -> RunResult:
    from ufhlab.scheduler import Scheduler

    search = Search(space, task, config, elitist=elitist, **kwargs)
    scheduler = scheduler or Scheduler()
    timecourse = scheduler.run(search)
    return RunResult(search.best(), timecourse, search.counter_summary(), search)


def run_regularized_evolution(space, task: Task, config: EvolutionConfig, scheduler=None,
                              **kwargs) -> RunResult:
    """Aging evolution: every admission beyond P evicts the oldest member."""
    return _run(space, task, config, scheduler, False, **kwargs)


def run_classic_tournament(space, task: Task, config: EvolutionConfig, scheduler=None,
                           **kwargs) -> RunResult:
    """Elitist tournament selection: every admission beyond P evicts the worst member."""
    return _run(space, task, config, scheduler, True, **kwargs)
