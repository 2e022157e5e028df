"""Imperative three-function programs over a small typed virtual memory.

Memory has scalar (``s``), vector (``v``) and matrix (``m``) banks. Before
every forward pass the features are written to ``v0`` and the prediction
register ``s1`` is cleared; the prediction is read back from ``s1``. The label
is written to ``s0`` just before each backward pass. Memory persists across
examples, so a program can learn.

All arithmetic saturates at +/-1e6, which keeps every candidate evaluable.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from ufhlab import _kernels as K
from ufhlab.spaces.base import (
    EvalConfig,
    FitnessRecord,
    InvalidCandidate,
    NoCapacity,
    Task,
    fitness_from_error,
    rms,
)

FUNCTIONS = ("initialize", "forward", "backward")
RESERVED = {("s", 0), ("s", 1), ("v", 0)}  # label, prediction, features


class Op(NamedTuple):
    name: str
    code: int
    ins: str  # bank letter per input
    out: str
    n_consts: int


OPS = (
    Op("s_const", K.S_CONST, "", "s", 1),
    Op("s_add", K.S_ADD, "ss", "s", 0),
    Op("s_sub", K.S_SUB, "ss", "s", 0),
    Op("s_mul", K.S_MUL, "ss", "s", 0),
    Op("s_div", K.S_DIV, "ss", "s", 0),
    Op("s_maximum", K.S_MAX, "ss", "s", 0),
    Op("s_heaviside", K.S_HEAVISIDE, "s", "s", 0),
    Op("s_gaussian", K.S_GAUSS, "", "s", 2),
    Op("v_add", K.V_ADD, "vv", "v", 0),
    Op("v_sub", K.V_SUB, "vv", "v", 0),
    Op("v_mul", K.V_MUL, "vv", "v", 0),
    Op("sv_mul", K.SV_MUL, "sv", "v", 0),
    Op("dot", K.V_DOT, "vv", "s", 0),
    Op("v_maximum_zero", K.V_MAX0, "v", "v", 0),
    Op("v_heaviside", K.V_HEAVISIDE, "v", "v", 0),
    Op("v_gaussian", K.V_GAUSS, "", "v", 2),
    Op("mv_dot", K.MV_DOT, "mv", "v", 0),
    Op("outer", K.V_OUTER, "vv", "m", 0),
    Op("m_add", K.M_ADD, "mm", "m", 0),
    Op("m_gaussian", K.M_GAUSS, "", "m", 2),
)
OP_BY_NAME = {op.name: op for op in OPS}
RANDOM_OPS = frozenset(("s_gaussian", "v_gaussian", "m_gaussian"))


class Instruction(NamedTuple):
    op: str
    inputs: tuple[int, ...] = ()
    out: int = 0
    consts: tuple[float, ...] = ()

    def reads(self) -> list[tuple[str, int]]:
        return list(zip(OP_BY_NAME[self.op].ins, self.inputs))

    def writes(self) -> tuple[str, int]:
        return OP_BY_NAME[self.op].out, self.out


def instr(op: str, *inputs: int, out: int, consts: tuple[float, ...] = ()) -> Instruction:
    return Instruction(op, tuple(inputs), out, tuple(float(c) for c in consts))


@dataclass(frozen=True)
class ProgramCandidate:
    initialize: tuple[Instruction, ...] = ()
    forward: tuple[Instruction, ...] = ()
    backward: tuple[Instruction, ...] = ()

    @property
    def functions(self) -> tuple[tuple[Instruction, ...], ...]:
        return (self.initialize, self.forward, self.backward)

    def replace_function(self, index: int, body) -> ProgramCandidate:
        parts = list(self.functions)
        parts[index] = tuple(body)
        return ProgramCandidate(*parts)

    def __len__(self):
        return sum(len(f) for f in self.functions)

    @cached_property
    def compiled(self):
        rows = [ins for f in self.functions for ins in f]
        code = np.zeros((max(len(rows), 1), 4), dtype=np.int64)
        consts = np.zeros((max(len(rows), 1), 2), dtype=np.float64)
        for k, ins in enumerate(rows):
            op = OP_BY_NAME[ins.op]
            a = ins.inputs[0] if len(ins.inputs) > 0 else 0
            b = ins.inputs[1] if len(ins.inputs) > 1 else 0
            code[k] = (op.code, a, b, ins.out)
            consts[k, : len(ins.consts)] = ins.consts
        return code, consts, len(self.initialize), len(self.forward), len(self.backward)


class Mutation(NamedTuple):
    candidate: ProgramCandidate
    kind: str  # insert | delete | modify


class ProgramSpace:
    kind = "program"

    def __init__(self, max_len=8, n_scalars=8, n_vectors=8, n_matrices=2, dim=4):
        if isinstance(max_len, int):
            max_len = (max_len,) * 3
        self.max_len = tuple(int(n) for n in max_len)
        if len(self.max_len) != 3 or min(self.max_len) < 0:
            raise ValueError("max_len must be a non-negative int or a 3-tuple of them")
        if n_scalars < 2 or n_vectors < 1 or n_matrices < 1 or dim < 1:
            raise ValueError("need at least s0, s1, v0, one matrix and dim >= 1")
        self.n_scalars = n_scalars
        self.n_vectors = n_vectors
        self.n_matrices = n_matrices
        self.dim = dim
        self._bank_size = {"s": n_scalars, "v": n_vectors, "m": n_matrices}

    def params(self) -> dict:
        return {"max_len": list(self.max_len), "n_scalars": self.n_scalars,
                "n_vectors": self.n_vectors, "n_matrices": self.n_matrices, "dim": self.dim}

    # -- sampling -------------------------------------------------------

    def _random_consts(self, op: Op, rng: random.Random) -> tuple[float, ...]:
        if op.n_consts == 1:
            return (rng.uniform(-1.0, 1.0),)
        if op.n_consts == 2:
            return (rng.uniform(-1.0, 1.0), rng.uniform(0.0, 1.0))
        return ()

    def random_instruction(self, rng: random.Random, ops=OPS, out_bank: str | None = None,
                           out: int | None = None) -> Instruction:
        if out_bank is not None:
            ops = [op for op in ops if op.out == out_bank]
        op = rng.choice(ops)
        inputs = tuple(rng.randrange(self._bank_size[b]) for b in op.ins)
        if out is None:
            out = rng.randrange(self._bank_size[op.out])
        return Instruction(op.name, inputs, out, self._random_consts(op, rng))

    def random_candidate(self, rng: random.Random) -> ProgramCandidate:
        parts = []
        for limit in self.max_len:
            n = rng.randint(0, limit)
            parts.append(tuple(self.random_instruction(rng) for _ in range(n)))
        return ProgramCandidate(*parts)

    def mutate(self, candidate: ProgramCandidate, rng: random.Random) -> ProgramCandidate:
        return self.mutate_detailed(candidate, rng).candidate

    def mutate_detailed(self, candidate: ProgramCandidate, rng: random.Random) -> Mutation:
        fns = candidate.functions
        roomy = [i for i, f in enumerate(fns) if len(f) < self.max_len[i]]
        filled = [i for i, f in enumerate(fns) if f]
        kinds = (["insert"] if roomy else []) + (["delete", "modify"] if filled else [])
        if not kinds:
            return Mutation(candidate, "none")
        kind = rng.choice(kinds)
        if kind == "insert":
            i = rng.choice(roomy)
            body = list(fns[i])
            body.insert(rng.randint(0, len(body)), self.random_instruction(rng))
        else:
            i = rng.choice(filled)
            body = list(fns[i])
            pos = rng.randrange(len(body))
            if kind == "delete":
                del body[pos]
            else:
                body[pos] = self._modify(body[pos], rng)
        return Mutation(candidate.replace_function(i, body), kind)

    def _modify(self, ins: Instruction, rng: random.Random) -> Instruction:
        op = OP_BY_NAME[ins.op]
        fields = ["op", "out"] + [("in", j) for j in range(len(op.ins))] \
            + [("const", j) for j in range(op.n_consts)]
        field = rng.choice(fields)
        if field == "op":
            others = [o for o in OPS if o.name != ins.op]
            return self.random_instruction(rng, ops=others)
        if field == "out":
            return ins._replace(out=self._other_address(op.out, ins.out, rng))
        kind, j = field
        if kind == "in":
            inputs = list(ins.inputs)
            inputs[j] = self._other_address(op.ins[j], inputs[j], rng)
            return ins._replace(inputs=tuple(inputs))
        consts = list(ins.consts)
        if rng.random() < 0.5:
            consts[j] = consts[j] * rng.uniform(0.5, 1.5)
        else:
            consts[j] = self._random_consts(op, rng)[j]
        return ins._replace(consts=tuple(consts))

    def _other_address(self, bank: str, current: int, rng: random.Random) -> int:
        size = self._bank_size[bank]
        if size == 1:
            return current
        new = rng.randrange(size - 1)
        return new if new < current else new + 1

    def equivalent_rewrite(self, candidate: ProgramCandidate, rng: random.Random) -> ProgramCandidate:
        """Insert one instruction that provably cannot change behaviour.

        Either a write to an address that nothing reads, or a write that the
        very next instruction overwrites without reading it. Random-number
        ops are never inserted since they would advance the RNG.
        """
        fns = candidate.functions
        roomy = [i for i, f in enumerate(fns) if len(f) < self.max_len[i]]
        if not roomy:
            raise NoCapacity("program is at maximum length in every function")
        safe_ops = [op for op in OPS if op.name not in RANDOM_OPS]
        read = {r for f in fns for ins in f for r in ins.reads()}
        unread = [(b, a) for b, n in self._bank_size.items() for a in range(n)
                  if (b, a) not in read and (b, a) not in RESERVED]
        overwritten = [(i, p) for i in roomy for p, ins in enumerate(fns[i])
                       if ins.writes() not in ins.reads()]
        choices = (["unread"] if unread else []) + (["overwritten"] if overwritten else [])
        if not choices:
            raise NoCapacity("no dead write slot available")
        if rng.choice(choices) == "unread":
            bank, addr = rng.choice(unread)
            i = rng.choice(roomy)
            pos = rng.randint(0, len(fns[i]))
        else:
            i, pos = rng.choice(overwritten)
            bank, addr = fns[i][pos].writes()
        new = self.random_instruction(rng, ops=safe_ops, out_bank=bank, out=addr)
        body = list(fns[i])
        body.insert(pos, new)
        return candidate.replace_function(i, body)

    # -- execution ------------------------------------------------------

    def evaluate(self, candidate: ProgramCandidate, task: Task, eval_config: EvalConfig,
                 rng: random.Random | None = None) -> FitnessRecord:
        tx, ty = task.examples("train", eval_config.n_train, self.dim)
        vx, vy = task.examples("valid", eval_config.n_valid, self.dim)
        errors = np.empty(eval_config.n_valid)
        code, consts, ni, nf, nb = candidate.compiled
        K.run_program(code, consts, ni, nf, nb, self.n_scalars, self.n_vectors, self.n_matrices,
                      tx, ty, vx, vy, np.uint64(task.eval_seed), errors)
        error = rms(errors)
        if eval_config.noise_sigma > 0:
            error += eval_config.noise_sigma * rng.gauss(0.0, 1.0)
        return FitnessRecord(fitness_from_error(error), eval_config.eval_cost)

    def harvest(self, candidate: ProgramCandidate, hash_config, task: Task | None = None):
        """Hashable outputs (prediction errors) for each hashing seed.

        Returns ``(rows, forward_passes, backward_passes)`` where ``rows`` has
        one row per seed: n_examples train errors followed by n_examples
        validation errors.
        """
        if task is None:
            raise ValueError("program-space hashing needs the task's canonical examples")
        n = hash_config.n_examples
        tx, ty = task.examples("train", n, self.dim)
        vx, vy = task.examples("valid", n, self.dim)
        out = np.empty((hash_config.n_seeds, 2 * n))
        code, consts, ni, nf, nb = candidate.compiled
        n_fwd, n_bwd = K.harvest_program(code, consts, ni, nf, nb, self.n_scalars, self.n_vectors,
                                         self.n_matrices, tx, ty, vx, vy, hash_config.seeds(), out)
        return out, n_fwd, n_bwd

    def hashable_outputs(self, candidate: ProgramCandidate, task: Task, phase: str, example: int,
                         hash_config=None) -> list[float]:
        """The prediction error harvested for one canonical example (first seed)."""
        from ufhlab.hashing import HashConfig

        hash_config = hash_config or HashConfig()
        rows, _, _ = self.harvest(candidate, hash_config, task=task)
        offset = {"train": 0, "validation": hash_config.n_examples}[phase]
        return [float(rows[0, offset + example])]

    # -- validation / serialization ------------------------------------

    def validate(self, candidate: ProgramCandidate) -> None:
        for i, f in enumerate(candidate.functions):
            if len(f) > self.max_len[i]:
                raise InvalidCandidate(f"{FUNCTIONS[i]} has {len(f)} instructions, max {self.max_len[i]}")
            for ins in f:
                op = OP_BY_NAME.get(ins.op)
                if op is None:
                    raise InvalidCandidate(f"unknown opcode {ins.op!r}")
                if len(ins.inputs) != len(op.ins) or len(ins.consts) != op.n_consts:
                    raise InvalidCandidate(f"{ins.op}: wrong operand or constant count")
                for bank, addr in list(zip(op.ins, ins.inputs)) + [(op.out, ins.out)]:
                    if not 0 <= addr < self._bank_size[bank]:
                        raise InvalidCandidate(f"{ins.op}: {bank}{addr} out of range")

    def to_json(self, candidate: ProgramCandidate) -> dict:
        def enc(ins: Instruction) -> dict:
            d = {"op": ins.op, "in": list(ins.inputs), "out": ins.out}
            if ins.consts:
                d["consts"] = list(ins.consts)
            return d

        return {"space": "program", **{name: [enc(i) for i in f]
                                       for name, f in zip(FUNCTIONS, candidate.functions)}}

    def from_json(self, data: dict) -> ProgramCandidate:
        if data.get("space") != "program":
            raise InvalidCandidate("not a program candidate")
        try:
            parts = []
            for name in FUNCTIONS:
                parts.append(tuple(
                    Instruction(str(d["op"]), tuple(int(a) for a in d["in"]), int(d["out"]),
                                tuple(float(c) for c in d.get("consts", ())))
                    for d in data.get(name, [])))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidCandidate(f"malformed instruction: {exc}") from exc
        candidate = ProgramCandidate(*parts)
        self.validate(candidate)
        return candidate


def format_program(candidate: ProgramCandidate) -> str:
    """Human-readable listing, one instruction per line."""
    lines = []
    for name, f in zip(FUNCTIONS, candidate.functions):
        lines.append(f"def {name}():")
        for ins in f:
            op = OP_BY_NAME[ins.op]
            args = [f"{b}{a}" for b, a in zip(op.ins, ins.inputs)] + [repr(c) for c in ins.consts]
            lines.append(f"  {op.out}{ins.out} = {ins.op}({', '.join(args)})")
    return "\n".join(lines)
