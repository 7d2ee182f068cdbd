"""Dense and brute-force reference implementations used only by the tests.

Nothing here calls the sparse engine's internals: unitaries are rebuilt from
their rules as dense matrices and expectation values come from plain numpy.
"""

from __future__ import annotations

import itertools
import math
from typing import Mapping, Sequence

import numpy as np


def givens(d: int, i: int, j: int, theta: float) -> np.ndarray:
    """Dense ``d x d`` matrix with ``e_i -> cos e_i + sin e_j`` and ``e_j -> cos e_j - sin e_i``."""
    m = np.eye(d)
    c, s = math.cos(theta), math.sin(theta)
    m[i - 1, i - 1] = c
    m[j - 1, i - 1] = s
    m[j - 1, j - 1] = c
    m[i - 1, j - 1] = -s
    return m


def local_dense(u) -> np.ndarray:
    """Dense local matrix of a structured unitary, rebuilt from its rules."""
    dims = u.dims
    dim = math.prod(dims)

    def flat(loc):
        return int(np.ravel_multi_index(tuple(x - 1 for x in loc), dims))

    m = np.eye(dim)
    for src, dst in u.permutation.items():
        m[:, flat(src)] = 0.0
        m[flat(dst), flat(src)] = 1.0
    for r in u.rotations:
        a, b = flat(r.a), flat(r.b)
        c, s = math.cos(r.theta), math.sin(r.theta)
        m[:, a] = 0.0
        m[:, b] = 0.0
        m[a, a], m[b, a] = c, s
        m[b, b], m[a, b] = c, -s
    return m


def apply_local(matrix: np.ndarray, factors: Sequence[int], shape: Sequence[int], vec: np.ndarray) -> np.ndarray:
    """Apply a matrix acting on ``factors`` of a dense vector on ``shape``."""
    shape = tuple(shape)
    t = np.asarray(vec, dtype=complex).reshape(shape)
    t = np.moveaxis(t, list(factors), list(range(len(factors))))
    front = t.shape[: len(factors)]
    t = (matrix @ t.reshape(math.prod(front), -1)).reshape(t.shape)
    return np.moveaxis(t, list(range(len(factors))), list(factors)).reshape(-1)


def apply_dense(u, shape, vec: np.ndarray) -> np.ndarray:
    steps = getattr(u, "steps", None) or (u,)
    for step in steps:
        vec = apply_local(local_dense(step), step.factors, shape, vec)
    return vec


def full_matrix(u, shape) -> np.ndarray:
    dim = math.prod(shape)
    return np.column_stack([apply_dense(u, shape, col) for col in np.eye(dim, dtype=complex)])


def block_projector(shape: Sequence[int], constraints: Mapping[int, int]) -> np.ndarray:
    """Diagonal projector onto basis vectors with the given 1-based indices at some factors."""
    diag = [
        1.0 if all(idx[f] + 1 == v for f, v in constraints.items()) else 0.0 for idx in np.ndindex(*tuple(shape))
    ]
    return np.diag(diag).astype(complex)


def born_dense(vec: np.ndarray, projector: np.ndarray) -> float:
    return float(np.real(np.vdot(vec, projector @ vec)))


def partial_trace_second(vec: np.ndarray, d1: int, d2: int) -> np.ndarray:
    m = np.asarray(vec).reshape(d1, d2)
    return m @ m.conj().T


def vd_subsets(w1: Sequence[float], w2: Sequence[float]) -> float:
    """``sup_S |m1(S) - m2(S)|`` by enumerating all subsets."""
    n = len(w1)
    best = 0.0
    for r in range(n + 1):
        for sub in itertools.combinations(range(n), r):
            best = max(best, abs(sum(w1[k] for k in sub) - sum(w2[k] for k in sub)))
    return best


def tedious_bruteforce(c, n, N, i, j, i2, j2, theta, phi) -> float:
    """Rung cost from an explicit dense six-factor computation.

    Rebuilds the initial state, the embezzling permutations and the
    rotations as dense arrays; only suitable for tiny ``D``.
    """
    d, m = len(c), max(n)
    D = N * math.prod(n)
    shape = (D, D, m, m, d, d)
    dim = math.prod(shape)
    cn2 = 1.0 / math.fsum(1.0 / k for k in range(1, D + 1))
    psi = np.zeros(shape, dtype=complex)
    for k in range(1, D + 1):
        for a in range(1, d + 1):
            psi[k - 1, k - 1, 0, 0, a - 1, a - 1] = math.sqrt(cn2) * c[a - 1] / math.sqrt(k)
    # U V: (k, 1, a) -> (ceil(k/n_a), k - n_a (ceil - 1), a) on each side
    out = np.zeros(shape, dtype=complex)
    for idx in zip(*np.nonzero(psi)):
        k, _, _, _, a, _ = (x + 1 for x in idx)
        b = -(-k // n[a - 1])
        jj = k - n[a - 1] * (b - 1)
        out[b - 1, b - 1, jj - 1, jj - 1, a - 1, a - 1] += psi[idx]
    vec = out.reshape(-1)
    rot_a = givens(m * d, (j - 1) * d + i, (j2 - 1) * d + i2, theta)
    rot_b = givens(m * d, (j - 1) * d + i, (j2 - 1) * d + i2, phi)
    vec = apply_local(rot_a, (2, 4), shape, vec)
    vec = apply_local(rot_b, (3, 5), shape, vec)
    probs = np.abs(vec.reshape(shape)) ** 2
    pa = probs[:, :, j - 1, :, i - 1, :].sum(axis=(0, 1))
    pb = probs[:, :, :, j - 1, :, i - 1].sum(axis=(0, 1))
    both = probs[:, :, j - 1, j - 1, i - 1, i - 1].sum()
    assert dim == probs.size
    return float(pa.sum() + pb.sum() - 2 * both)
