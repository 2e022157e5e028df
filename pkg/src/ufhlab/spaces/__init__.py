from ufhlab.spaces.base import (
    EvalConfig,
    EvaluationFault,
    FitnessRecord,
    InvalidCandidate,
    NoCapacity,
    Task,
)
from ufhlab.spaces.graph import GraphCandidate, GraphSpace, Vertex
from ufhlab.spaces.program import Instruction, ProgramCandidate, ProgramSpace, instr

SPACES = {"program": ProgramSpace, "graph": GraphSpace}


def make_space(kind: str, **params):
    try:
        cls = SPACES[kind]
    except KeyError:
        raise ValueError(f"unknown space {kind!r}; expected one of {sorted(SPACES)}") from None
    return cls(**params)


__all__ = [
    "EvalConfig", "EvaluationFault", "FitnessRecord", "GraphCandidate", "GraphSpace",
    "Instruction", "InvalidCandidate", "NoCapacity", "ProgramCandidate", "ProgramSpace",
    "SPACES", "Task", "Vertex", "instr", "make_space",
]
