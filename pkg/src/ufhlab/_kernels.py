"""Compiled inner loops: splitmix64, FNV-1a folding and the program interpreter.

Everything in here works on plain numpy arrays so it can be jitted by numba.
The pure-Python equivalents in :mod:`ufhlab.hashing` define the semantics; the
test suite checks both routes agree bit for bit.
"""

import numpy as np
from numba import njit

U64 = np.uint64
FNV_OFFSET = U64(14695981039346656037)
FNV_PRIME = U64(1099511628211)
GOLDEN = U64(0x9E3779B97F4A7C15)
MIX1 = U64(0xBF58476D1CE4E5B9)
MIX2 = U64(0x94D049BB133111EB)
MANTISSA_MASK = U64((1 << 52) - 1)
EXP_MASK = U64(0x7FF)
BYTE = U64(0xFF)

SATURATION = 1.0e6

# Program opcodes. Keep in sync with ufhlab.spaces.program.OPS.
S_CONST = 0
S_ADD = 1
S_SUB = 2
S_MUL = 3
S_DIV = 4
S_MAX = 5
S_HEAVISIDE = 6
S_GAUSS = 7
V_ADD = 8
V_SUB = 9
V_MUL = 10
SV_MUL = 11
V_DOT = 12
V_MAX0 = 13
V_HEAVISIDE = 14
V_GAUSS = 15
MV_DOT = 16
V_OUTER = 17
M_ADD = 18
M_GAUSS = 19


@njit(cache=True)
def splitmix_next(state):
    """Advance a one-element uint64 state array and return the next output."""
    state[0] += GOLDEN
    z = state[0]
    z = (z ^ (z >> U64(30))) * MIX1
    z = (z ^ (z >> U64(27))) * MIX2
    return z ^ (z >> U64(31))


@njit(cache=True)
def splitmix_uniform(state):
    return float(splitmix_next(state) >> U64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def splitmix_gaussian(state):
    # Irwin-Hall(12): only +,- on doubles, so it is portable bit for bit.
    acc = 0.0
    for _ in range(12):
        acc += splitmix_uniform(state)
    return acc - 6.0


@njit(cache=True)
def mix_u64(h, val):
    for i in range(8):
        h = (h ^ ((val >> U64(8 * i)) & BYTE)) * FNV_PRIME
    return h


@njit(cache=True)
def fold_floats(h, values, m_bits):
    """Fold every float of ``values`` (in order) into ``h`` as sign, exponent, mantissa."""
    bits = values.view(np.uint64)
    shift = U64(52 - m_bits)
    for i in range(bits.shape[0]):
        raw = bits[i]
        sgn = raw >> U64(63)
        exp = (raw >> U64(52)) & EXP_MASK
        man = raw & MANTISSA_MASK
        if exp == EXP_MASK and man != U64(0):
            sgn = U64(0)
            man = U64(0)
        else:
            man = man >> shift
        h = mix_u64(h, sgn)
        h = mix_u64(h, exp)
        h = mix_u64(h, man)
    return h


@njit(cache=True)
def fold_seed_rows(rows, m_bits):
    """One sub-hash per row, each started from the offset basis, chained in row order."""
    acc = FNV_OFFSET
    for r in range(rows.shape[0]):
        sub = fold_floats(FNV_OFFSET, rows[r], m_bits)
        acc = mix_u64(acc, sub)
    return acc


@njit(cache=True)
def _sat(x):
    if x != x:
        return 0.0
    if x > SATURATION:
        return SATURATION
    if x < -SATURATION:
        return -SATURATION
    return x


@njit(cache=True)
def _div(a, b):
    if b == 0.0:
        if a == 0.0:
            return 0.0
        return SATURATION if a > 0.0 else -SATURATION
    return a / b


@njit(cache=True)
def _heaviside(x):
    return 0.0 if x < 0.0 else 1.0


@njit(cache=True)
def exec_block(code, consts, lo, hi, s, v, m, tmp, rng):
    dim = v.shape[1]
    for k in range(lo, hi):
        op = code[k, 0]
        a = code[k, 1]
        b = code[k, 2]
        o = code[k, 3]
        if op == S_CONST:
            s[o] = _sat(consts[k, 0])
        elif op == S_ADD:
            s[o] = _sat(s[a] + s[b])
        elif op == S_SUB:
            s[o] = _sat(s[a] - s[b])
        elif op == S_MUL:
            s[o] = _sat(s[a] * s[b])
        elif op == S_DIV:
            s[o] = _sat(_div(s[a], s[b]))
        elif op == S_MAX:
            s[o] = s[a] if s[a] >= s[b] else s[b]
        elif op == S_HEAVISIDE:
            s[o] = _heaviside(s[a])
        elif op == S_GAUSS:
            s[o] = _sat(consts[k, 0] + consts[k, 1] * splitmix_gaussian(rng))
        elif op == V_ADD:
            for i in range(dim):
                v[o, i] = _sat(v[a, i] + v[b, i])
        elif op == V_SUB:
            for i in range(dim):
                v[o, i] = _sat(v[a, i] - v[b, i])
        elif op == V_MUL:
            for i in range(dim):
                v[o, i] = _sat(v[a, i] * v[b, i])
        elif op == SV_MUL:
            x = s[a]
            for i in range(dim):
                v[o, i] = _sat(x * v[b, i])
        elif op == V_DOT:
            acc = 0.0
            for i in range(dim):
                acc += v[a, i] * v[b, i]
            s[o] = _sat(acc)
        elif op == V_MAX0:
            for i in range(dim):
                x = v[a, i]
                v[o, i] = x if x > 0.0 else 0.0
        elif op == V_HEAVISIDE:
            for i in range(dim):
                v[o, i] = _heaviside(v[a, i])
        elif op == V_GAUSS:
            for i in range(dim):
                v[o, i] = _sat(consts[k, 0] + consts[k, 1] * splitmix_gaussian(rng))
        elif op == MV_DOT:
            for i in range(dim):
                acc = 0.0
                for j in range(dim):
                    acc += m[a, i, j] * v[b, j]
                tmp[i] = acc
            for i in range(dim):
                v[o, i] = _sat(tmp[i])
        elif op == V_OUTER:
            for i in range(dim):
                for j in range(dim):
                    m[o, i, j] = _sat(v[a, i] * v[b, j])
        elif op == M_ADD:
            for i in range(dim):
                for j in range(dim):
                    m[o, i, j] = _sat(m[a, i, j] + m[b, i, j])
        elif op == M_GAUSS:
            for i in range(dim):
                for j in range(dim):
                    m[o, i, j] = _sat(consts[k, 0] + consts[k, 1] * splitmix_gaussian(rng))


@njit(cache=True)
def _forward(code, consts, lo, hi, s, v, m, tmp, rng, x):
    # s1 (prediction) is cleared and v0 receives the features before every forward pass.
    s[1] = 0.0
    for i in range(v.shape[1]):
        v[0, i] = x[i]
    exec_block(code, consts, lo, hi, s, v, m, tmp, rng)
    return s[1]


@njit(cache=True)
def run_program(code, consts, n_init, n_fwd, n_bwd, n_scalars, n_vectors, n_matrices,
                train_x, train_y, valid_x, valid_y, seed, out_errors):
    """Initialize, train on every train example, then record validation errors.

    ``out_errors`` receives label - prediction for each validation example.
    Returns (forward passes, backward passes).
    """
    dim = train_x.shape[1]
    s = np.zeros(n_scalars)
    v = np.zeros((n_vectors, dim))
    m = np.zeros((n_matrices, dim, dim))
    tmp = np.zeros(dim)
    rng = np.empty(1, dtype=np.uint64)
    rng[0] = seed
    f0 = n_init
    b0 = n_init + n_fwd
    b1 = b0 + n_bwd
    exec_block(code, consts, 0, f0, s, v, m, tmp, rng)
    n_forward = 0
    n_backward = 0
    for e in range(train_x.shape[0]):
        _forward(code, consts, f0, b0, s, v, m, tmp, rng, train_x[e])
        s[0] = train_y[e]
        exec_block(code, consts, b0, b1, s, v, m, tmp, rng)
        n_forward += 1
        n_backward += 1
    for e in range(valid_x.shape[0]):
        pred = _forward(code, consts, f0, b0, s, v, m, tmp, rng, valid_x[e])
        out_errors[e] = valid_y[e] - pred
        n_forward += 1
    return n_forward, n_backward


@njit(cache=True)
def harvest_program(code, consts, n_init, n_fwd, n_bwd, n_scalars, n_vectors, n_matrices,
                    train_x, train_y, valid_x, valid_y, seeds, out):
    """Hashable outputs for each seed: train errors (pre-update) then validation errors.

    ``out`` has shape (len(seeds), len(train) + len(valid)).
    Returns (forward passes, backward passes).
    """
    dim = train_x.shape[1]
    n_tr = train_x.shape[0]
    f0 = n_init
    b0 = n_init + n_fwd
    b1 = b0 + n_bwd
    n_forward = 0
    n_backward = 0
    s = np.zeros(n_scalars)
    v = np.zeros((n_vectors, dim))
    m = np.zeros((n_matrices, dim, dim))
    tmp = np.zeros(dim)
    rng = np.empty(1, dtype=np.uint64)
    for r in range(seeds.shape[0]):
        s[:] = 0.0
        v[:, :] = 0.0
        m[:, :, :] = 0.0
        rng[0] = seeds[r]
        exec_block(code, consts, 0, f0, s, v, m, tmp, rng)
        for e in range(n_tr):
            pred = _forward(code, consts, f0, b0, s, v, m, tmp, rng, train_x[e])
            out[r, e] = train_y[e] - pred
            s[0] = train_y[e]
            exec_block(code, consts, b0, b1, s, v, m, tmp, rng)
            n_forward += 1
            n_backward += 1
        for e in range(valid_x.shape[0]):
            pred = _forward(code, consts, f0, b0, s, v, m, tmp, rng, valid_x[e])
            out[r, n_tr + e] = valid_y[e] - pred
            n_forward += 1
    return n_forward, n_backward
