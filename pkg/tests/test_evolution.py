import math
import random
from collections import Counter

import pytest

from ufhlab.evolution import (
    Cache,
    ConfigError,
    EvolutionConfig,
    Individual,
    Population,
    PopulationTooSmall,
    Search,
    Tabulist,
    acquire_fea,
    acquire_fec,
    acquire_fec_forgetful,
    gate_tabulist,
    mutate_fcm,
    run_classic_tournament,
    run_regularized_evolution,
)
from ufhlab.hashing import HashConfig, unified_functional_hash
from ufhlab.spaces import EvalConfig, FitnessRecord, GraphSpace, ProgramSpace, Task

PTASK = Task("affine_regression", 0)
GTASK = Task("nonlinear_regression", 0)


def _ind(fitness, index):
    return Individual(None, FitnessRecord(fitness, 1.0), index)


def _pop(fitnesses, elitist=False):
    pop = Population(len(fitnesses), elitist)
    for i, f in enumerate(fitnesses):
        pop.add(_ind(f, i))
    return pop


class CountingEvaluator:
    def __init__(self, space, task, ev=EvalConfig(), rng=None):
        self.space, self.task, self.ev, self.rng = space, task, ev, rng
        self.calls = 0
        self.draws = []

    def __call__(self, candidate):
        self.calls += 1
        rec = self.space.evaluate(candidate, self.task, self.ev, self.rng)
        self.draws.append(rec.fitness)
        return rec


class CountingMutator:
    """Space proxy that counts mutate() calls."""

    def __init__(self, space):
        self.space = space
        self.calls = 0

    def mutate(self, candidate, rng):
        self.calls += 1
        return self.space.mutate(candidate, rng)


def _step_all(search):
    while not search.done:
        search.admit(search.propose(), 0.0)


# -- selection / population --------------------------------------------------------


def test_select_parent_whole_population_is_global_best():
    pop = _pop([0.1, 0.9, 0.3, 0.5])
    for s in range(20):
        assert pop_best(pop) is select_parent_of(pop, 4, s)


def pop_best(pop):
    return max(pop, key=lambda m: (m.fitness, m.index))


def select_parent_of(pop, T, seed):
    from ufhlab.evolution import select_parent

    return select_parent(pop, T, random.Random(seed))


def test_select_parent_singleton_is_uniform():
    pop = _pop([0.1 * i for i in range(5)])
    counts = Counter(select_parent_of(pop, 1, s).index for s in range(5000))
    assert set(counts) == set(range(5))
    assert all(abs(c / 5000 - 0.2) < 0.03 for c in counts.values())


def test_select_parent_ties_pick_newest_sampled():
    from ufhlab.evolution import select_parent

    pop = _pop([0.5] * 10)
    for s in range(50):
        rng = random.Random(s)
        picks = random.Random(s).sample(range(10), 3)
        assert select_parent(pop, 3, rng).index == max(picks)


def test_select_parent_too_small():
    with pytest.raises(PopulationTooSmall):
        select_parent_of(_pop([0.1, 0.2]), 3, 0)


def test_population_fifo_and_elitist_eviction():
    fifo = _pop([0.9, 0.1, 0.5])
    assert fifo.add(_ind(0.2, 3)).index == 0
    elit = _pop([0.9, 0.1, 0.1], elitist=True)
    assert elit.add(_ind(0.2, 3)).index == 1  # oldest of the two worst
    assert len(fifo) == len(elit) == 3


# -- controllers ----------------------------------------------------------------


def test_population_size_after_warmup_both_controllers():
    space = GraphSpace()
    for elitist in (False, True):
        s = Search(space, GTASK, EvolutionConfig(population_size=20, tournament_size=5,
                                                 n_candidates=200), elitist=elitist)
        while not s.done:
            s.admit(s.propose(), 0.0)
            if s.n_admitted >= 20:
                assert len(s.population) == 20


def test_random_search_when_n_equals_p():
    space = GraphSpace()
    cfg = EvolutionConfig(population_size=30, tournament_size=5, n_candidates=30, seed=4)
    rng = random.Random("search:4")
    fits = [space.evaluate(space.random_candidate(rng), GTASK, EvalConfig()).fitness for _ in range(30)]
    for run in (run_regularized_evolution, run_classic_tournament):
        res = run(space, GTASK, cfg)
        assert res.best.fitness == max(fits)
        assert res.counters["eval_calls"] == 30


def test_run_is_deterministic():
    space = GraphSpace()
    cfg = EvolutionConfig(population_size=20, tournament_size=5, n_candidates=300, seed=1)
    a = run_regularized_evolution(space, GTASK, cfg)
    b = run_regularized_evolution(space, GTASK, cfg)
    assert a.timecourse == b.timecourse
    assert a.search.events == b.search.events
    assert a.counters == b.counters


def test_classic_tournament_keeps_global_best():
    space = GraphSpace()
    s = Search(space, GTASK, EvolutionConfig(population_size=20, tournament_size=5,
                                             n_candidates=1000, seed=2), elitist=True)
    best = -math.inf
    while not s.done:
        adm = s.admit(s.propose(), 0.0)
        best = max(best, adm.fitness)
        assert s.population.best().fitness == best


class RiggedSpace:
    """Candidate 0 has fitness 1; every other candidate (all fresh ints) has 0.5."""

    def __init__(self):
        self.counter = 0

    def random_candidate(self, rng):
        c = self.counter
        self.counter += 1
        return c

    def mutate(self, candidate, rng):
        self.counter += 1
        return self.counter

    def evaluate(self, candidate, task, eval_config, rng=None):
        return FitnessRecord(1.0 if candidate == 0 else 0.5, 1.0)


def test_rigged_space_elitism_vs_aging():
    P = 10
    cfg = EvolutionConfig(population_size=P, tournament_size=3, n_candidates=100)
    for elitist in (False, True):
        s = Search(RiggedSpace(), GTASK, cfg, elitist=elitist)
        gone_at = None
        while not s.done:
            s.admit(s.propose(), 0.0)
            present = any(m.candidate == 0 for m in s.population)
            if not present and gone_at is None:
                gone_at = s.n_admitted
        if elitist:
            assert gone_at is None
        else:
            assert gone_at == P + 1  # the (P+1)-th admission evicts it
            assert all(m.candidate != 0 for m in s.population)


def _covering_hash(task):
    return HashConfig(m_bits=52, n_examples=100, n_seeds=1, fixed_seed=task.eval_seed)


def test_fec_transparency_small_suite():
    space = ProgramSpace()
    for seed in range(5):
        cfg = EvolutionConfig(population_size=20, tournament_size=5, n_candidates=600, seed=seed)
        hc = _covering_hash(PTASK)
        runs = {}
        for tech in ("none", "fec"):
            s = Search(space, PTASK, EvolutionConfig(**{**cfg.__dict__, "technique": tech}),
                       hash_config=hc)
            _step_all(s)
            runs[tech] = s
        none, fec = runs["none"], runs["fec"]
        assert [e["fitness"] for e in none.events] == [e["fitness"] for e in fec.events]
        assert [m.candidate for m in none.population] == [m.candidate for m in fec.population]
        assert fec.cache.hits > 0
        assert fec.counters.eval_calls == none.counters.eval_calls - fec.cache.hits


# -- acquisition techniques ------------------------------------------------------


@pytest.fixture(scope="module")
def pspace():
    return ProgramSpace()


def _hash_fn(space, task=PTASK, cfg=HashConfig()):
    return lambda c: unified_functional_hash(c, space, cfg, task=task)


def test_acquire_fec_hits_and_rewrites(pspace):
    cache = Cache()
    ev = CountingEvaluator(pspace, PTASK)
    h = _hash_fn(pspace)
    c = pspace.random_candidate(random.Random(0))
    first = acquire_fec(c, cache, h, ev)
    assert acquire_fec(c, cache, h, ev) == first
    assert ev.calls == 1 and (cache.hits, cache.misses) == (1, 1)
    r = pspace.equivalent_rewrite(c, random.Random(1))
    assert acquire_fec(r, cache, h, ev) == first
    assert ev.calls == 1 and cache.hits == 2


def test_acquire_fec_eviction(pspace):
    cache = Cache(capacity=2)
    ev = CountingEvaluator(pspace, PTASK)
    h = _hash_fn(pspace)
    rng = random.Random(2)
    cands = []
    while len(cands) < 3:
        c = pspace.random_candidate(rng)
        if h(c) not in {h(x) for x in cands}:
            cands.append(c)
    for c in cands:
        acquire_fec(c, cache, h, ev)
    assert len(cache) == 2 and cache.evictions == 1
    acquire_fec(cands[0], cache, h, ev)
    assert ev.calls == 4 and cache.misses == 4


def test_forgetful_f0_matches_fec():
    space = GraphSpace()
    base = dict(population_size=20, tournament_size=5, n_candidates=500, seed=3)
    a = Search(space, GTASK, EvolutionConfig(technique="fec", **base))
    b = Search(space, GTASK, EvolutionConfig(technique="fec_forgetful", forget_prob=0.0, **base))
    _step_all(a)
    _step_all(b)
    assert a.events == b.events
    assert a.counter_summary() == b.counter_summary()


def test_forgetful_f1_reevaluates_third_submission(pspace):
    cache = Cache()
    ev = CountingEvaluator(pspace, PTASK)
    h = _hash_fn(pspace)
    c = pspace.random_candidate(random.Random(3))
    for _ in range(3):
        acquire_fec_forgetful(c, cache, h, ev, 1.0, random.Random(0))
    assert ev.calls == 2
    assert cache.forgets == 1


def test_forgetful_binomial():
    cache = Cache()
    rng = random.Random(4)
    ev = lambda c: FitnessRecord(0.5, 1.0)
    while cache.hits < 10_000:
        acquire_fec_forgetful("x", cache, lambda c: 1, ev, 0.1, rng)
    sd = math.sqrt(10_000 * 0.1 * 0.9)
    assert abs(cache.forgets - 1000) <= 3 * sd


def test_fea_noisy_mean(pspace):
    M = 4
    cache = Cache()
    ev = CountingEvaluator(pspace, PTASK, EvalConfig(noise_sigma=0.3), random.Random(5))
    h = _hash_fn(pspace)
    c = pspace.random_candidate(random.Random(6))
    for _ in range(M + 5):
        rec = acquire_fea(c, cache, h, ev, M)
    assert ev.calls == M
    assert rec.evals == M
    assert abs(rec.fitness - math.fsum(ev.draws) / M) <= 1e-12


def test_fea_deterministic_mean_is_single_eval(pspace):
    cache = Cache()
    ev = CountingEvaluator(pspace, PTASK)
    h = _hash_fn(pspace)
    c = pspace.random_candidate(random.Random(7))
    for _ in range(6):
        rec = acquire_fea(c, cache, h, ev, 10)
    assert rec.fitness == ev.draws[0]


def test_fea_m1_matches_fec():
    space = GraphSpace()
    base = dict(population_size=20, tournament_size=5, n_candidates=500, seed=5)
    ev = EvalConfig(noise_sigma=0.1)
    a = Search(space, GTASK, EvolutionConfig(technique="fec", **base), eval_config=ev)
    b = Search(space, GTASK, EvolutionConfig(technique="fea", max_evals=1, **base), eval_config=ev)
    _step_all(a)
    _step_all(b)
    assert [e["fitness"] for e in a.events] == [e["fitness"] for e in b.events]
    assert a.counter_summary() == b.counter_summary()


def test_fcm_single_retry_is_plain_mutation():
    space = GraphSpace()
    h = _hash_fn(space, GTASK)
    rng = random.Random(8)
    for s in range(100):
        parent = space.random_candidate(rng)
        assert mutate_fcm(parent, space, random.Random(s), 1, h) == space.mutate(parent, random.Random(s))


def test_fcm_effective_first_mutation_stops():
    from ufhlab.spaces import GraphCandidate, Vertex

    space = GraphSpace(max_v=1)
    parent = GraphCandidate(2, (Vertex("const", (), 0.5),), 2)
    h = _hash_fn(space, GTASK)
    for s in range(50):
        counting = CountingMutator(space)
        child = mutate_fcm(parent, counting, random.Random(s), 32, h)
        if h(space.mutate(parent, random.Random(s))) != h(parent):
            assert counting.calls == 1
            assert h(child) != h(parent)


def test_fcm_silent_mutation_continues():
    space = GraphSpace()
    h = _hash_fn(space, GTASK)
    rng = random.Random(9)
    parent = space.random_candidate(rng)
    seed = next(s for s in range(10_000) if h(space.mutate(parent, random.Random(s))) == h(parent))
    counting = CountingMutator(space)
    child = mutate_fcm(parent, counting, random.Random(seed), 32, h)
    assert counting.calls >= 2
    assert h(child) != h(parent) or counting.calls == 32


def test_tabulist_gate_rules(pspace):
    h = _hash_fn(pspace)
    tab = Tabulist()
    c = pspace.random_candidate(random.Random(10))
    counting = CountingMutator(pspace)
    assert gate_tabulist(c, tab, counting, random.Random(0), 2, 32, h) is c
    assert counting.calls == 0 and tab[h(c)] == 1
    gate_tabulist(c, tab, counting, random.Random(0), 2, 32, h)
    assert tab[h(c)] == 2 and counting.calls == 0
    gate_tabulist(c, tab, counting, random.Random(0), 2, 32, h)
    assert counting.calls >= 1
    assert tab[h(c)] == 2 or counting.calls == 32


def test_tabulist_infinite_k_matches_plain_dynamics():
    space = GraphSpace()
    base = dict(population_size=20, tournament_size=5, n_candidates=400, seed=6)
    a = Search(space, GTASK, EvolutionConfig(**base))
    b = Search(space, GTASK, EvolutionConfig(technique="tabulist", tabulist_k=math.inf, **base))
    _step_all(a)
    _step_all(b)
    assert [e["fitness"] for e in a.events] == [e["fitness"] for e in b.events]
    assert a.counters.mutations == b.counters.mutations


def test_tabulist_counts_sum_to_admissions():
    space = GraphSpace(max_v=3)
    res = run_regularized_evolution(space, GTASK, EvolutionConfig(
        population_size=20, tournament_size=5, n_candidates=500, technique="tabulist",
        tabulist_k=1, seed=7))
    assert res.counters["tabulist_total"] == res.counters["admitted"] == 500
    assert res.counters["mutations"] > 500 - 20  # tight space forces extra mutations


def test_events_record_cache_activity():
    space = GraphSpace()
    res = run_regularized_evolution(space, GTASK, EvolutionConfig(
        population_size=20, tournament_size=5, n_candidates=300, technique="fec"))
    ev = res.search.events
    assert {e["cache_event"] for e in ev} <= {"hit", "miss"}
    assert all(len(e["hash"]) == 16 for e in ev)
    assert ev[-1]["evaluator_calls"] == res.counters["eval_calls"]
    assert sum(e["cache_event"] == "hit" for e in ev) == res.counters["hits"]


@pytest.mark.parametrize("kwargs", [
    dict(population_size=10, tournament_size=11, n_candidates=100),
    dict(population_size=10, tournament_size=0, n_candidates=100),
    dict(population_size=100, tournament_size=5, n_candidates=50),
    dict(forget_prob=1.5),
    dict(max_evals=0),
    dict(tabulist_k=0),
    dict(max_retry=0),
    dict(technique="magic"),
])
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        EvolutionConfig(**kwargs).validate()


def test_counterfactual_requires_fec():
    with pytest.raises(ConfigError):
        Search(GraphSpace(), GTASK, EvolutionConfig(), counterfactual_tolerance=1e-9)
