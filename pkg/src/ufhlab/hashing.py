"""Unified functional hashing.

A candidate is fingerprinted by running a short, seeded, canonical version of
its own evaluation and folding the floating-point by-products ("hashable
outputs") into a 64-bit FNV-1a accumulator. Each float contributes its sign,
raw exponent and the ``m_bits`` most significant mantissa bits, so values that
agree to that precision hash identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ufhlab import _kernels

FNV_OFFSET_BASIS = 14695981039346656037
FNV_PRIME = 1099511628211
MASK64 = (1 << 64) - 1

#: A functional hash is just an unsigned 64-bit int.
FunctionalHash = int


def hash_hex(value: FunctionalHash) -> str:
    """Canonical text form used in every output file."""
    return f"{value & MASK64:016x}"


@dataclass(frozen=True)
class HashConfig:
    m_bits: int = 24
    n_examples: int = 10
    n_seeds: int = 3
    fixed_seed: int = 0x5EED_F00D

    def __post_init__(self):
        if not 0 <= self.m_bits <= 52:
            raise ValueError(f"m_bits must be in [0, 52], got {self.m_bits}")
        if self.n_examples < 1:
            raise ValueError(f"n_examples must be >= 1, got {self.n_examples}")
        if self.n_seeds < 1:
            raise ValueError(f"n_seeds must be >= 1, got {self.n_seeds}")
        if not 0 <= self.fixed_seed <= MASK64:
            raise ValueError("fixed_seed must be an unsigned 64-bit integer")

    def seeds(self) -> np.ndarray:
        return np.array([(self.fixed_seed + i) & MASK64 for i in range(self.n_seeds)],
                        dtype=np.uint64)


class FloatFingerprint(NamedTuple):
    sign: int
    exponent: int
    mantissa: int


@dataclass
class HashCounters:
    """Instrumentation for hashing cost (passes over canonical examples)."""
    hashes: int = 0
    forward_passes: int = 0
    backward_passes: int = 0

    def add(self, forward: int, backward: int) -> None:
        self.hashes += 1
        self.forward_passes += forward
        self.backward_passes += backward


def float_bits(x: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", x))[0]


def decompose_float(x: float, m_bits: int) -> FloatFingerprint:
    """Split a binary64 value into sign, raw exponent and truncated mantissa.

    NaNs collapse to ``(0, 0x7FF, 0)``; infinities keep their sign.
    """
    if not 0 <= m_bits <= 52:
        raise ValueError(f"m_bits must be in [0, 52], got {m_bits}")
    bits = float_bits(x)
    sign = bits >> 63
    exponent = (bits >> 52) & 0x7FF
    mantissa = bits & ((1 << 52) - 1)
    if exponent == 0x7FF and mantissa:
        return FloatFingerprint(0, 0x7FF, 0)
    return FloatFingerprint(sign, exponent, mantissa >> (52 - m_bits))


def hash_mix(h: FunctionalHash, value: int) -> FunctionalHash:
    """FNV-1a over the eight little-endian bytes of ``value``."""
    for byte in (value & MASK64).to_bytes(8, "little"):
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def add_to_hash(h: FunctionalHash, hashable_output: float, m_bits: int) -> FunctionalHash:
    for val in decompose_float(hashable_output, m_bits):
        h = hash_mix(h, val)
    return h


def fold_outputs(h: FunctionalHash, outputs, m_bits: int) -> FunctionalHash:
    """Compiled equivalent of calling :func:`add_to_hash` on each output in turn."""
    arr = np.ascontiguousarray(outputs, dtype=np.float64)
    return int(_kernels.fold_floats(np.uint64(h), arr, m_bits))


def combine_seed_outputs(rows: np.ndarray, m_bits: int) -> FunctionalHash:
    """Hash a (n_seeds, n_outputs) harvest.

    Every row is folded into its own sub-hash starting at the offset basis;
    the sub-hashes are then mixed into one accumulator, seed 0 first.
    """
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    return int(_kernels.fold_seed_rows(rows, m_bits))


def unified_functional_hash(candidate, space, config: HashConfig, *, task=None,
                            counters: HashCounters | None = None) -> FunctionalHash:
    """Functional hash of ``candidate`` under ``space``'s canonical harvest.

    The space runs the seeded canonical evaluation (its ``harvest`` method)
    with a private RNG, so the caller's random streams are never touched.
    """
    rows, n_fwd, n_bwd = space.harvest(candidate, config, task=task)
    if counters is not None:
        counters.add(n_fwd, n_bwd)
    return combine_seed_outputs(rows, config.m_bits)


class SplitMix64:
    """Small portable generator; used for hashing seeds and fake data."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)
        return lo + (hi - lo) * u

    def gaussian(self, mean: float = 0.0, std: float = 1.0) -> float:
        acc = 0.0
        for _ in range(12):
            acc += self.uniform()
        return mean + std * (acc - 6.0)
