"""Fixed-size compute DAGs (loss-graph / cell style search space).

A graph has ``n_inputs`` input nodes followed by ``max_v`` vertex slots.
Node references are integers: ``0..n_inputs-1`` are inputs and
``n_inputs + j`` is slot ``j``. A slot may only reference strictly earlier
nodes, so every graph is acyclic by construction. Slots not on a path to the
designated output are inert.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import NamedTuple

import numpy as np

from ufhlab.hashing import SplitMix64
from ufhlab.spaces.base import (
    EvalConfig,
    FitnessRecord,
    InvalidCandidate,
    NoCapacity,
    Task,
    fitness_from_error,
)

ARITY = {"add": 2, "sub": 2, "mul": 2, "max": 2, "neg": 1, "relu": 1, "identity": 1, "const": 0}
OPCODES = tuple(ARITY)
FAKE_DATA_RANGE = 100.0


class Vertex(NamedTuple):
    op: str
    inputs: tuple[int, ...] = ()
    const: float = 0.0


@dataclass(frozen=True)
class GraphCandidate:
    n_inputs: int
    vertices: tuple[Vertex, ...]
    output: int  # node reference

    @cached_property
    def reachable(self) -> frozenset[int]:
        """Slot indices on a path to the output."""
        seen = set()
        stack = [self.output]
        while stack:
            node = stack.pop()
            j = node - self.n_inputs
            if j < 0 or j in seen:
                continue
            seen.add(j)
            stack.extend(self.vertices[j].inputs)
        return frozenset(seen)

    def replace_vertex(self, j: int, vertex: Vertex) -> GraphCandidate:
        vs = list(self.vertices)
        vs[j] = vertex
        return GraphCandidate(self.n_inputs, tuple(vs), self.output)


def graph_outputs(candidate: GraphCandidate, x: np.ndarray) -> np.ndarray:
    """Evaluate the output node on a batch of inputs of shape (n, n_inputs)."""
    n_in = candidate.n_inputs
    if candidate.output < n_in:
        return np.array(x[:, candidate.output], dtype=np.float64)
    values: dict[int, np.ndarray] = {i: x[:, i] for i in range(n_in)}
    with np.errstate(all="ignore"):
        for j in sorted(candidate.reachable):
            v = candidate.vertices[j]
            a = [values[r] for r in v.inputs]
            op = v.op
            if op == "add":
                out = a[0] + a[1]
            elif op == "sub":
                out = a[0] - a[1]
            elif op == "mul":
                out = a[0] * a[1]
            elif op == "max":
                out = np.maximum(a[0], a[1])
            elif op == "neg":
                out = -a[0]
            elif op == "relu":
                out = np.maximum(a[0], 0.0)
            elif op == "identity":
                out = a[0]
            else:
                out = np.full(x.shape[0], v.const)
            values[n_in + j] = out
    return np.array(values[candidate.output], dtype=np.float64)


class Mutation(NamedTuple):
    candidate: GraphCandidate
    kind: str  # rewire | identity | modify


@lru_cache(maxsize=64)
def fake_inputs(fixed_seed: int, n: int, n_inputs: int) -> np.ndarray:
    """Uniform [-100, 100] canonical inputs drawn from the hashing seed."""
    rng = SplitMix64(fixed_seed)
    x = np.array([[rng.uniform(-FAKE_DATA_RANGE, FAKE_DATA_RANGE) for _ in range(n_inputs)]
                  for _ in range(n)], dtype=np.float64).reshape(n, n_inputs)
    x.setflags(write=False)
    return x


class GraphSpace:
    kind = "graph"

    def __init__(self, max_v: int = 20, n_inputs: int = 2):
        if max_v < 1 or n_inputs < 1:
            raise ValueError("need max_v >= 1 and n_inputs >= 1")
        self.max_v = max_v
        self.n_inputs = n_inputs

    def params(self) -> dict:
        return {"max_v": self.max_v, "n_inputs": self.n_inputs}

    # -- sampling -------------------------------------------------------

    def random_vertex(self, j: int, rng: random.Random, ops=OPCODES) -> Vertex:
        op = rng.choice(ops)
        inputs = tuple(rng.randrange(self.n_inputs + j) for _ in range(ARITY[op]))
        const = rng.uniform(-1.0, 1.0) if op == "const" else 0.0
        return Vertex(op, inputs, const)

    def random_candidate(self, rng: random.Random) -> GraphCandidate:
        vertices = tuple(self.random_vertex(j, rng) for j in range(self.max_v))
        output = self.n_inputs + rng.randrange(self.max_v)
        return GraphCandidate(self.n_inputs, vertices, output)

    def mutate(self, candidate: GraphCandidate, rng: random.Random) -> GraphCandidate:
        return self.mutate_detailed(candidate, rng).candidate

    def mutate_detailed(self, candidate: GraphCandidate, rng: random.Random) -> Mutation:
        kind = rng.choice(("rewire", "identity", "modify"))
        vs = candidate.vertices
        n_in = self.n_inputs
        if kind == "rewire":
            # The output designation counts as one more rewirable edge.
            targets = [j for j, v in enumerate(vs) if v.inputs] + [None]
            j = rng.choice(targets)
            if j is None:
                output = n_in + rng.randrange(self.max_v)
                return Mutation(GraphCandidate(n_in, vs, output), kind)
            v = vs[j]
            inputs = list(v.inputs)
            inputs[rng.randrange(len(inputs))] = rng.randrange(n_in + j)
            return Mutation(candidate.replace_vertex(j, v._replace(inputs=tuple(inputs))), kind)
        j = rng.randrange(self.max_v)
        v = vs[j]
        if kind == "identity":
            src = v.inputs[0] if v.inputs else rng.randrange(n_in + j)
            return Mutation(candidate.replace_vertex(j, Vertex("identity", (src,))), kind)
        if v.op == "const" and rng.random() < 0.5:
            if rng.random() < 0.5:
                const = v.const * rng.uniform(0.5, 1.5)
            else:
                const = rng.uniform(-1.0, 1.0)
            return Mutation(candidate.replace_vertex(j, v._replace(const=const)), kind)
        op = rng.choice([o for o in OPCODES if o != v.op])
        inputs = list(v.inputs[: ARITY[op]])
        while len(inputs) < ARITY[op]:
            inputs.append(rng.randrange(n_in + j))
        const = rng.uniform(-1.0, 1.0) if op == "const" else 0.0
        return Mutation(candidate.replace_vertex(j, Vertex(op, tuple(inputs), const)), kind)

    def equivalent_rewrite(self, candidate: GraphCandidate, rng: random.Random) -> GraphCandidate:
        """Fill an unreachable slot with either junk or an identity splice.

        The identity splice routes one edge (or the output) through
        ``identity(v)``; the junk variant writes a random vertex that nothing
        on the output path reads.
        """
        n_in = self.n_inputs
        free = [j for j in range(self.max_v) if j not in candidate.reachable]
        if not free:
            raise NoCapacity("every slot is on the output path")
        splices = []
        for k in free:
            for u in sorted(candidate.reachable):
                if u <= k:
                    continue
                for pos, src in enumerate(candidate.vertices[u].inputs):
                    if src < n_in + k:
                        splices.append((k, u, pos, src))
            if candidate.output < n_in + k:
                splices.append((k, None, None, candidate.output))
        if splices and rng.random() < 0.5:
            k, u, pos, src = rng.choice(splices)
            g = candidate.replace_vertex(k, Vertex("identity", (src,)))
            if u is None:
                return GraphCandidate(n_in, g.vertices, n_in + k)
            v = g.vertices[u]
            inputs = list(v.inputs)
            inputs[pos] = n_in + k
            return g.replace_vertex(u, v._replace(inputs=tuple(inputs)))
        k = rng.choice(free)
        old = candidate.vertices[k]
        new = self.random_vertex(k, rng)
        while new == old:
            new = self.random_vertex(k, rng)
        return candidate.replace_vertex(k, new)

    # -- execution ------------------------------------------------------

    def evaluate(self, candidate: GraphCandidate, task: Task, eval_config: EvalConfig,
                 rng: random.Random | None = None) -> FitnessRecord:
        vx, vy = task.examples("valid", eval_config.n_valid, self.n_inputs)
        pred = graph_outputs(candidate, vx)
        with np.errstate(all="ignore"):
            error = float(np.sqrt(np.mean(np.square(vy - pred))))
        if eval_config.noise_sigma > 0:
            error += eval_config.noise_sigma * rng.gauss(0.0, 1.0)
        return FitnessRecord(fitness_from_error(error), eval_config.eval_cost)

    def harvest(self, candidate: GraphCandidate, hash_config, task: Task | None = None):
        """Graph outputs on the canonical fake inputs, repeated per seed.

        Graphs have no training phase, so the backward pass is a no-op; it is
        still counted so the cost accounting matches the program space.
        """
        n = hash_config.n_examples
        x = fake_inputs(hash_config.fixed_seed, 2 * n, self.n_inputs)
        row = graph_outputs(candidate, x)
        rows = np.tile(row, (hash_config.n_seeds, 1))
        return rows, hash_config.n_seeds * 2 * n, hash_config.n_seeds * n

    def hashable_outputs(self, candidate: GraphCandidate, task: Task | None, phase: str,
                         example: int, hash_config=None) -> list[float]:
        from ufhlab.hashing import HashConfig

        hash_config = hash_config or HashConfig()
        n = hash_config.n_examples
        offset = {"train": 0, "validation": n}[phase]
        x = fake_inputs(hash_config.fixed_seed, 2 * n, self.n_inputs)
        return [float(graph_outputs(candidate, x[offset + example: offset + example + 1])[0])]

    # -- validation / serialization ------------------------------------

    def validate(self, candidate: GraphCandidate) -> None:
        if candidate.n_inputs != self.n_inputs or len(candidate.vertices) != self.max_v:
            raise InvalidCandidate("graph shape does not match the space")
        for j, v in enumerate(candidate.vertices):
            if v.op not in ARITY:
                raise InvalidCandidate(f"slot {j}: unknown opcode {v.op!r}")
            if len(v.inputs) != ARITY[v.op]:
                raise InvalidCandidate(f"slot {j}: {v.op} takes {ARITY[v.op]} inputs")
            if any(not 0 <= r < self.n_inputs + j for r in v.inputs):
                raise InvalidCandidate(f"slot {j}: edge does not point to an earlier node")
        if not 0 <= candidate.output < self.n_inputs + self.max_v:
            raise InvalidCandidate("output reference out of range")

    def to_json(self, candidate: GraphCandidate) -> dict:
        def enc(v: Vertex) -> dict:
            d = {"op": v.op, "in": list(v.inputs)}
            if v.op == "const":
                d["const"] = v.const
            return d

        return {"space": "graph", "n_inputs": candidate.n_inputs,
                "vertices": [enc(v) for v in candidate.vertices], "output": candidate.output}

    def from_json(self, data: dict) -> GraphCandidate:
        if data.get("space") != "graph":
            raise InvalidCandidate("not a graph candidate")
        try:
            vertices = tuple(Vertex(str(d["op"]), tuple(int(r) for r in d["in"]),
                                    float(d.get("const", 0.0))) for d in data["vertices"])
            candidate = GraphCandidate(int(data["n_inputs"]), vertices, int(data["output"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidCandidate(f"malformed graph: {exc}") from exc
        self.validate(candidate)
        return candidate
