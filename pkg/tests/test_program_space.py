import json
import math
import random
from collections import Counter

import numpy as np
import pytest

from oracles import reference_fitness
from ufhlab.hashing import HashConfig, unified_functional_hash
from ufhlab.spaces import (
    EvalConfig,
    InvalidCandidate,
    NoCapacity,
    ProgramCandidate,
    ProgramSpace,
    Task,
    instr,
)
from ufhlab.spaces.program import format_program

TASK = Task("affine_regression", 0)

# Hand-written SGD affine regressor (learning rate in s2, bias in s4, weights in v1).
SHORT = ProgramCandidate(
    initialize=(instr("s_const", out=2, consts=(0.01,)),),
    forward=(instr("s_add", 1, 4, out=1),
             instr("dot", 1, 0, out=5),
             instr("s_add", 1, 5, out=1)),
    backward=(instr("s_sub", 0, 1, out=3),
              instr("s_mul", 2, 3, out=3),
              instr("s_add", 4, 3, out=4),
              instr("sv_mul", 3, 0, out=2),
              instr("v_add", 1, 2, out=1)),
)
# Same learner with three dead writes to v2 and a duplicated overwrite.
LONG = ProgramCandidate(
    initialize=SHORT.initialize,
    forward=SHORT.forward,
    backward=(instr("sv_mul", 2, 1, out=2),
              instr("sv_mul", 4, 1, out=2),
              instr("sv_mul", 4, 0, out=2),
              instr("s_sub", 0, 1, out=3),
              instr("s_mul", 2, 3, out=3),
              instr("s_add", 4, 3, out=4),
              instr("sv_mul", 3, 0, out=2),
              instr("sv_mul", 3, 0, out=2),
              instr("v_add", 1, 2, out=1)),
)


@pytest.fixture(scope="module")
def space():
    return ProgramSpace()


def test_zero_length_space_gives_empty_program():
    sp = ProgramSpace(max_len=0)
    rng = random.Random(0)
    c = sp.random_candidate(rng)
    assert len(c) == 0
    assert sp.hashable_outputs(c, TASK, "train", 0) == [float(TASK.examples("train", 1, 4)[1][0])]


def test_random_candidates_valid_and_deterministic(space):
    r1, r2 = random.Random(1), random.Random(1)
    a = [space.random_candidate(r1) for _ in range(10_000)]
    b = [space.random_candidate(r2) for _ in range(10_000)]
    assert a == b
    for c in a:
        space.validate(c)


def test_empty_program_only_inserts(space):
    rng = random.Random(2)
    kinds = {space.mutate_detailed(ProgramCandidate(), rng).kind for _ in range(200)}
    assert kinds == {"insert"}


def _slot_diff(a: ProgramCandidate, b: ProgramCandidate) -> int:
    """Number of instruction slots that differ, counting insertions/deletions as one."""
    diff = 0
    for fa, fb in zip(a.functions, b.functions):
        if len(fa) == len(fb):
            diff += sum(x != y for x, y in zip(fa, fb))
        else:
            short, long_ = sorted((fa, fb), key=len)
            assert len(long_) == len(short) + 1
            assert any(long_[:i] + long_[i + 1:] == short for i in range(len(long_)))
            diff += 1
    return diff


def test_mutation_is_atomic(space):
    rng = random.Random(3)
    for _ in range(2000):
        c = space.random_candidate(rng)
        m = space.mutate_detailed(c, rng)
        space.validate(m.candidate)
        assert _slot_diff(c, m.candidate) <= 1


def test_mutation_kind_frequencies(space):
    rng = random.Random(4)
    counts = Counter()
    n = 0
    while n < 10_000:
        c = space.random_candidate(rng)
        fns = c.functions
        if not (any(f for f in fns) and any(len(f) < 8 for f in fns)):
            continue
        counts[space.mutate_detailed(c, rng).kind] += 1
        n += 1
    for kind in ("insert", "delete", "modify"):
        assert abs(counts[kind] / n - 1 / 3) <= 0.05


def test_constant_mutation_multiplicative_or_resampled(space):
    rng = random.Random(5)
    c = ProgramCandidate(forward=(instr("s_const", out=1, consts=(0.5,)),))
    seen_scaled = seen_resampled = False
    for _ in range(500):
        m = space.mutate_detailed(c, rng)
        if m.kind != "modify" or m.candidate.forward[0].op != "s_const":
            continue
        ins = m.candidate.forward[0]
        if ins.out != 1:
            continue
        v = ins.consts[0]
        if 0.25 <= v <= 0.75:
            seen_scaled = True
        else:
            seen_resampled = True
    assert seen_scaled and seen_resampled


def test_empty_program_fitness_closed_form(space):
    ev = EvalConfig(n_train=50, n_valid=30)
    _, vy = TASK.examples("valid", 30, 4)
    w, b = TASK.parameters(4)
    vx, _ = TASK.examples("valid", 30, 4)
    labels = vx @ w + b
    np.testing.assert_allclose(labels, vy)
    expected = 1.0 / (1.0 + math.sqrt(float(np.mean(labels ** 2))))
    assert space.evaluate(ProgramCandidate(), TASK, ev).fitness == pytest.approx(expected, abs=1e-12)


def test_evaluate_matches_reference_interpreter(space):
    rng = random.Random(6)
    ev = EvalConfig(n_train=20, n_valid=10)
    for _ in range(30):
        c = space.random_candidate(rng)
        got = space.evaluate(c, TASK, ev).fitness
        assert got == pytest.approx(reference_fitness(c, space, TASK, 20, 10), rel=1e-12, abs=1e-15)


def test_sgd_program_learns():
    sp = ProgramSpace(max_len=16)
    rec = sp.evaluate(SHORT, TASK, EvalConfig(n_train=1000, n_valid=20))
    assert rec.fitness >= 0.95


def test_long_variant_equivalent():
    sp = ProgramSpace(max_len=16)
    cfg = HashConfig()
    assert unified_functional_hash(SHORT, sp, cfg, task=TASK) == unified_functional_hash(LONG, sp, cfg, task=TASK)
    ev = EvalConfig(n_train=1000)
    assert sp.evaluate(SHORT, TASK, ev).fitness == sp.evaluate(LONG, TASK, ev).fitness


def test_deterministic_evaluation(space):
    c = space.random_candidate(random.Random(7))
    ev = EvalConfig()
    assert space.evaluate(c, TASK, ev) == space.evaluate(c, TASK, ev)


def test_noise_applied_to_error(space):
    ev = EvalConfig(noise_sigma=0.5)
    c = ProgramCandidate()
    f = [space.evaluate(c, TASK, ev, random.Random(i)).fitness for i in range(50)]
    assert len(set(f)) > 1
    assert all(0.0 <= x <= 1.0 for x in f)


def test_zero_prediction_outputs_label(space):
    c = ProgramCandidate(forward=(instr("s_const", out=1, consts=(0.0,)),))
    for phase, split in (("train", "train"), ("validation", "valid")):
        _, ys = TASK.examples(split, 10, 4)
        for e in range(10):
            assert space.hashable_outputs(c, TASK, phase, e) == [float(ys[e])]
    out = [space.hashable_outputs(c, TASK, "train", 3) for _ in range(100)]
    assert all(o == out[0] for o in out)


def test_saturation_keeps_fitness_in_range(space):
    squares = tuple(instr("s_mul", 2, 2, out=2) for _ in range(6))
    c = ProgramCandidate(initialize=(instr("s_const", out=2, consts=(1e5,)),),
                         forward=squares[:2] + (instr("s_add", 2, 2, out=1),))
    rec = space.evaluate(c, TASK, EvalConfig())
    assert 0.0 <= rec.fitness <= 1.0 and math.isfinite(rec.fitness)
    div0 = ProgramCandidate(forward=(instr("s_div", 3, 4, out=1), instr("s_div", 0, 4, out=1)))
    assert 0.0 <= space.evaluate(div0, TASK, EvalConfig()).fitness <= 1.0
    rng = random.Random(8)
    for _ in range(500):
        f = space.evaluate(space.random_candidate(rng), TASK, EvalConfig()).fitness
        assert 0.0 <= f <= 1.0


# -- equivalent rewrites ------------------------------------------------------------


def _probe_rows(space, c, seed):
    task = Task("affine_regression", 1000 + seed)
    cfg = HashConfig(m_bits=52, n_examples=25, n_seeds=2, fixed_seed=seed)
    rows, _, _ = space.harvest(c, cfg, task=task)
    return rows


def test_equivalent_rewrites_hash_equal_and_bit_exact(space):
    rng = random.Random(9)
    cfg = HashConfig()
    pairs = 0
    while pairs < 500:
        c = space.random_candidate(rng)
        try:
            r = space.equivalent_rewrite(c, rng)
        except NoCapacity:
            continue
        pairs += 1
        assert r != c
        assert unified_functional_hash(c, space, cfg, task=TASK) == unified_functional_hash(r, space, cfg, task=TASK)
        if pairs <= 50:
            for seed in range(20):  # 20 probes x 50 examples = 10^3 probe inputs
                assert np.array_equal(_probe_rows(space, c, seed), _probe_rows(space, r, seed))
        try:
            rr = space.equivalent_rewrite(r, rng)
        except NoCapacity:
            continue
        assert unified_functional_hash(rr, space, cfg, task=TASK) == unified_functional_hash(c, space, cfg, task=TASK)


def test_rewrite_needs_capacity(space):
    rng = random.Random(10)
    full = ProgramCandidate(*(tuple(space.random_instruction(rng) for _ in range(8)) for _ in range(3)))
    with pytest.raises(NoCapacity):
        space.equivalent_rewrite(full, rng)


# -- serialization / validation -----------------------------------------------------


def test_json_round_trip(space):
    rng = random.Random(11)
    for _ in range(300):
        c = space.random_candidate(rng)
        text = json.dumps(space.to_json(c))
        assert space.from_json(json.loads(text)) == c


def test_validation_rejects_bad_programs(space):
    data = space.to_json(SHORT)
    data["forward"][0]["out"] = 99
    with pytest.raises(InvalidCandidate):
        space.from_json(data)
    data = space.to_json(SHORT)
    data["forward"][0]["op"] = "teleport"
    with pytest.raises(InvalidCandidate):
        space.from_json(data)
    with pytest.raises(InvalidCandidate):
        space.from_json({"space": "graph"})


def test_format_program_lists_every_instruction():
    text = format_program(SHORT)
    assert text.count("\n") == 3 + len(SHORT) - 1
    assert "s1 = s_add(s1, s4)" in text
