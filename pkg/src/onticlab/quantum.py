"""Sparse finite-dimensional quantum mechanics.

States live on a tensor product of finite factors and are stored as a mapping
from 1-based multi-indices to complex amplitudes.  Unitaries are never dense:
they are given by their action on basis vectors (permutations and two-level
Givens rotations acting on a subset of the factors).  Observables are
families of mutually orthogonal projectors, either onto basis-aligned blocks
or onto single rays, optionally conjugated by a *frame* of unitaries.

Everything here is immutable and side-effect free.  The Born rule evaluated
through these objects is the brute-force oracle that the closed-form
expressions elsewhere in the package are checked against.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Hashable, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import (
    NotAProjectorError,
    RuleConflictError,
    ShapeMismatchError,
    ValidationError,
)

MultiIndex = tuple[int, ...]


# ---------------------------------------------------------------------------
# numeric policy


@dataclass(frozen=True)
class NumericPolicy:
    """Absolute tolerances used throughout the package.

    ``exact`` applies to direct constructions, ``aggregate`` to composed or
    summed quantities, ``oracle`` to closed form versus brute force on large
    supports.  ``prune`` drops amplitudes whose modulus is at most this value
    (0 keeps everything except exact zeros).
    """

    exact: float = 1e-12
    aggregate: float = 1e-10
    oracle: float = 1e-9
    prune: float = 0.0


_POLICY: contextvars.ContextVar[NumericPolicy] = contextvars.ContextVar(
    "onticlab_policy", default=NumericPolicy()
)


def get_policy() -> NumericPolicy:
    return _POLICY.get()


@contextlib.contextmanager
def numeric_policy(**overrides: float) -> Iterator[NumericPolicy]:
    """Temporarily override tolerances, e.g. ``with numeric_policy(oracle=1e-8):``."""
    token = _POLICY.set(replace(_POLICY.get(), **overrides))
    try:
        yield _POLICY.get()
    finally:
        _POLICY.reset(token)


# ---------------------------------------------------------------------------
# states


def check_index(index: Sequence[int], shape: Sequence[int]) -> MultiIndex:
    """Validate a 1-based multi-index against ``shape`` and return it as a tuple."""
    idx = tuple(int(i) for i in index)
    if len(idx) != len(shape):
        raise ShapeMismatchError(f"index {idx} has {len(idx)} factors, shape {tuple(shape)} has {len(shape)}")
    for pos, (i, dim) in enumerate(zip(idx, shape)):
        if not 1 <= i <= dim:
            raise ValidationError(f"index {idx}: factor {pos} value {i} outside [1, {dim}]")
    return idx


def _clean(amps: Mapping[MultiIndex, complex], prune: float) -> dict[MultiIndex, complex]:
    if prune > 0.0:
        return {k: v for k, v in amps.items() if abs(v) > prune}
    return {k: v for k, v in amps.items() if v != 0}


def _norm_sq(amps: Mapping[MultiIndex, complex]) -> float:
    return math.fsum(a.real * a.real + a.imag * a.imag for a in amps.values())


def _inner(left: Mapping[MultiIndex, complex], right: Mapping[MultiIndex, complex]) -> complex:
    if len(right) < len(left):
        pairs = ((left.get(k), v) for k, v in right.items())
    else:
        pairs = ((v, right.get(k)) for k, v in left.items())
    re, im = [], []
    for a, b in pairs:
        if a is None or b is None:
            continue
        z = a.conjugate() * b
        re.append(z.real)
        im.append(z.imag)
    return complex(math.fsum(re), math.fsum(im))


@dataclass(frozen=True, eq=False)
class SparseState:
    """A unit vector on a tensor product of finite factors.

    ``amplitudes`` maps 1-based multi-indices to complex numbers; absent keys
    are zero.  The norm is checked at construction against the policy's
    ``exact`` tolerance.
    """

    shape: tuple[int, ...]
    amplitudes: Mapping[MultiIndex, complex]

    def __post_init__(self) -> None:
        shape = tuple(int(s) for s in self.shape)
        if not shape or any(s < 1 for s in shape):
            raise ValidationError(f"invalid shape {shape}")
        amps: dict[MultiIndex, complex] = {}
        for idx, amp in self.amplitudes.items():
            key = check_index(idx, shape)
            amps[key] = amps.get(key, 0j) + complex(amp)
        amps = _clean(amps, get_policy().prune)
        norm_sq = _norm_sq(amps)
        if abs(norm_sq - 1.0) > get_policy().exact:
            raise ValidationError(f"state is not normalized: squared norm deviates from 1 by {norm_sq - 1.0:.3e}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "amplitudes", MappingProxyType(amps))

    @classmethod
    def _trusted(cls, shape: tuple[int, ...], amps: dict[MultiIndex, complex]) -> SparseState:
        # skips index validation; used on outputs of norm-preserving maps
        obj = object.__new__(cls)
        amps = _clean(amps, get_policy().prune)
        norm_sq = _norm_sq(amps)
        if abs(norm_sq - 1.0) > get_policy().exact:
            raise ValidationError(f"state is not normalized: squared norm deviates from 1 by {norm_sq - 1.0:.3e}")
        object.__setattr__(obj, "shape", shape)
        object.__setattr__(obj, "amplitudes", MappingProxyType(amps))
        return obj

    @classmethod
    def basis(cls, shape: Sequence[int], index: Sequence[int]) -> SparseState:
        return cls(tuple(shape), {tuple(index): 1.0})

    @classmethod
    def from_dense(cls, shape: Sequence[int], vector: np.ndarray) -> SparseState:
        shape = tuple(int(s) for s in shape)
        vec = np.asarray(vector, dtype=complex).reshape(shape)
        amps = {tuple(int(i) + 1 for i in idx): complex(vec[idx]) for idx in zip(*np.nonzero(vec))}
        return cls(shape, amps)

    def __len__(self) -> int:
        return len(self.amplitudes)

    @property
    def dimension(self) -> int:
        return math.prod(self.shape)

    def norm(self) -> float:
        return math.sqrt(_norm_sq(self.amplitudes))

    def inner(self, other: SparseState) -> complex:
        """Return ``<self|other>``."""
        _require_same_shape(self.shape, other.shape)
        return _inner(self.amplitudes, other.amplitudes)

    def to_dense(self) -> np.ndarray:
        """Flattened dense vector in row-major (first factor slowest) order."""
        vec = np.zeros(self.shape, dtype=complex)
        for idx, amp in self.amplitudes.items():
            vec[tuple(i - 1 for i in idx)] = amp
        return vec.reshape(-1)

    def permute_factors(self, order: Sequence[int]) -> SparseState:
        """Reorder factors: new factor ``p`` is old factor ``order[p]``."""
        order = tuple(order)
        if sorted(order) != list(range(len(self.shape))):
            raise ValidationError(f"{order} is not a permutation of the factors")
        shape = tuple(self.shape[o] for o in order)
        amps = {tuple(idx[o] for o in order): a for idx, a in self.amplitudes.items()}
        return SparseState._trusted(shape, amps)


@dataclass(frozen=True, eq=False)
class Mixture:
    """A convex combination of pure states, used to tag mixed preparations."""

    components: tuple[tuple[float, SparseState], ...]

    def __post_init__(self) -> None:
        comps = tuple((float(w), s) for w, s in self.components)
        if not comps:
            raise ValidationError("empty mixture")
        shapes = {s.shape for _, s in comps}
        if len(shapes) != 1:
            raise ShapeMismatchError(f"mixture components have shapes {sorted(shapes)}")
        if any(w < 0 for w, _ in comps):
            raise ValidationError("negative mixture weight")
        total = math.fsum(w for w, _ in comps)
        if abs(total - 1.0) > get_policy().exact:
            raise ValidationError(f"mixture weights sum to {total!r}")
        object.__setattr__(self, "components", comps)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.components[0][1].shape


QuantumState = Union[SparseState, Mixture]


def _require_same_shape(a: Sequence[int], b: Sequence[int]) -> None:
    if tuple(a) != tuple(b):
        raise ShapeMismatchError(f"shape mismatch: {tuple(a)} vs {tuple(b)}")


def tensor(*states: SparseState) -> SparseState:
    """Tensor product, factors concatenated left to right."""
    if not states:
        raise ValidationError("tensor() needs at least one state")
    shape: tuple[int, ...] = ()
    amps: dict[MultiIndex, complex] = {(): 1.0 + 0j}
    for st in states:
        shape += st.shape
        amps = {k1 + k2: a1 * a2 for k1, a1 in amps.items() for k2, a2 in st.amplitudes.items()}
    return SparseState._trusted(shape, amps)


def schmidt_state(c: Sequence[float], d: int) -> SparseState:
    """Bipartite state with amplitude ``c[i]`` on ``e_i (x) e_i``.

    Raises:
        ValidationError: wrong length, a negative weight, or weights whose
            squares do not sum to one (the message carries the defect).
    """
    c = [float(x) for x in c]
    if len(c) != d:
        raise ValidationError(f"expected {d} Schmidt weights, got {len(c)}")
    if any(x < 0 for x in c):
        raise ValidationError("Schmidt weights must be nonnegative")
    defect = math.fsum(x * x for x in c) - 1.0
    if abs(defect) > get_policy().exact:
        raise ValidationError(f"Schmidt weights not normalized: sum of squares deviates from 1 by {defect:.3e}")
    return SparseState((d, d), {(i + 1, i + 1): x for i, x in enumerate(c) if x != 0.0})


def maximally_entangled(d: int) -> SparseState:
    return schmidt_state([1.0 / math.sqrt(d)] * d, d)


def fidelity(s1: SparseState, s2: SparseState) -> float:
    """Overlap modulus ``|<s1|s2>|``."""
    _require_same_shape(s1.shape, s2.shape)
    return min(1.0, abs(_inner(s1.amplitudes, s2.amplitudes)))


def same_ray(s1: SparseState, s2: SparseState, tol: float | None = None) -> bool:
    tol = get_policy().aggregate if tol is None else tol
    return s1.shape == s2.shape and fidelity(s1, s2) >= 1.0 - tol


# ---------------------------------------------------------------------------
# structured unitaries


@dataclass(frozen=True)
class Rotation:
    """Two-level rotation ``a -> cos a + sin b``, ``b -> cos b - sin a``."""

    a: MultiIndex
    b: MultiIndex
    theta: float


@dataclass(frozen=True, eq=False)
class StructuredUnitary:
    """A unitary acting on the factors at positions ``factors``.

    The local action is a permutation of local basis tuples plus a set of
    disjoint two-level rotations; every local basis tuple not mentioned is
    left alone, and indices on the other factors are carried along unchanged.
    """

    factors: tuple[int, ...]
    dims: tuple[int, ...]
    permutation: Mapping[MultiIndex, MultiIndex] = field(default_factory=dict)
    rotations: tuple[Rotation, ...] = ()
    label: str = ""

    def __post_init__(self) -> None:
        factors = tuple(int(f) for f in self.factors)
        dims = tuple(int(d) for d in self.dims)
        if len(factors) != len(dims) or len(set(factors)) != len(factors):
            raise ValidationError(f"bad factor list {factors} for dims {dims}")
        perm = {}
        for src, dst in self.permutation.items():
            src, dst = check_index(src, dims), check_index(dst, dims)
            if src != dst:
                perm[src] = dst
        if set(perm) != set(perm.values()):
            raise RuleConflictError("permutation rules are not a bijection on their domain")
        claimed = set(perm)
        rots = []
        for rot in self.rotations:
            a, b = check_index(rot.a, dims), check_index(rot.b, dims)
            if a == b:
                raise RuleConflictError(f"rotation between {a} and itself")
            for loc in (a, b):
                if loc in claimed:
                    raise RuleConflictError(f"local basis vector {loc} is claimed by two rules")
                claimed.add(loc)
            rots.append(Rotation(a, b, float(rot.theta)))
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "permutation", MappingProxyType(perm))
        object.__setattr__(self, "rotations", tuple(rots))
        table = {}
        for r in rots:
            c, s = math.cos(r.theta), math.sin(r.theta)
            table[r.a] = (r.b, c, s)
            table[r.b] = (r.a, c, -s)
        object.__setattr__(self, "_rot_table", table)

    @classmethod
    def from_partial_map(
        cls,
        factors: Sequence[int],
        dims: Sequence[int],
        mapping: Mapping[MultiIndex, MultiIndex],
        label: str = "",
    ) -> StructuredUnitary:
        """Extend an injective partial map of basis vectors to a permutation.

        The images that are not themselves in the domain are sent back onto
        the domain vectors that are not images, pairing both sets in sorted
        order; everything else is fixed.
        """
        dims = tuple(dims)
        src = {check_index(k, dims): check_index(v, dims) for k, v in mapping.items()}
        if len(set(src.values())) != len(src):
            raise RuleConflictError("partial map is not injective")
        domain, image = set(src), set(src.values())
        perm = dict(src)
        for back, fwd in zip(sorted(image - domain), sorted(domain - image)):
            perm[back] = fwd
        return cls(tuple(factors), dims, perm, (), label)

    @classmethod
    def identity(cls, factors: Sequence[int], dims: Sequence[int]) -> StructuredUnitary:
        return cls(tuple(factors), tuple(dims))

    def inverse(self) -> StructuredUnitary:
        perm = {v: k for k, v in self.permutation.items()}
        rots = tuple(Rotation(r.a, r.b, -r.theta) for r in self.rotations)
        return StructuredUnitary(self.factors, self.dims, perm, rots, f"{self.label}^-1" if self.label else "")

    def acting_on(self, factors: Sequence[int]) -> StructuredUnitary:
        return StructuredUnitary(tuple(factors), self.dims, self.permutation, self.rotations, self.label)

    def _check(self, shape: tuple[int, ...]) -> None:
        for f, d in zip(self.factors, self.dims):
            if f >= len(shape) or shape[f] != d:
                raise ShapeMismatchError(f"unitary expects dimension {d} at factor {f}, state shape is {shape}")

    def _apply_raw(self, amps: Mapping[MultiIndex, complex]) -> dict[MultiIndex, complex]:
        out: dict[MultiIndex, complex] = {}
        factors, perm, table = self.factors, self.permutation, self._rot_table
        for idx, amp in amps.items():
            loc = tuple(idx[f] for f in factors)
            if loc in perm:
                new = list(idx)
                for f, v in zip(factors, perm[loc]):
                    new[f] = v
                key = tuple(new)
                out[key] = out.get(key, 0j) + amp
            elif loc in table:
                partner, c, s = table[loc]
                out[idx] = out.get(idx, 0j) + c * amp
                new = list(idx)
                for f, v in zip(factors, partner):
                    new[f] = v
                key = tuple(new)
                out[key] = out.get(key, 0j) + s * amp
            else:
                out[idx] = out.get(idx, 0j) + amp
        return out

    def apply(self, state: SparseState) -> SparseState:
        self._check(state.shape)
        return SparseState._trusted(state.shape, self._apply_raw(state.amplitudes))

    def local_matrix(self) -> np.ndarray:
        """Dense matrix of the local action (for small factors and tests)."""
        dim = math.prod(self.dims)
        mat = np.zeros((dim, dim))
        local = self.acting_on(range(len(self.factors)))
        for col, loc in enumerate(np.ndindex(*self.dims)):
            loc1 = tuple(i + 1 for i in loc)
            for key, amp in local._apply_raw({loc1: 1.0 + 0j}).items():
                row = np.ravel_multi_index(tuple(i - 1 for i in key), self.dims)
                mat[row, col] = amp.real
        return mat


@dataclass(frozen=True, eq=False)
class UnitarySequence:
    """Product of structured unitaries, applied left to right."""

    steps: tuple[StructuredUnitary, ...]
    label: str = ""

    def apply(self, state: SparseState) -> SparseState:
        for step in self.steps:
            state = step.apply(state)
        return state

    def inverse(self) -> UnitarySequence:
        return UnitarySequence(tuple(s.inverse() for s in reversed(self.steps)))

    def _apply_raw(self, amps):
        for step in self.steps:
            amps = step._apply_raw(amps)
        return amps

    def _check(self, shape):
        for step in self.steps:
            step._check(shape)


Unitary = Union[StructuredUnitary, UnitarySequence]


def compose(*unitaries: Unitary) -> UnitarySequence:
    """``compose(u1, u2)`` applies ``u1`` first, then ``u2``."""
    steps: list[StructuredUnitary] = []
    for u in unitaries:
        steps.extend(u.steps if isinstance(u, UnitarySequence) else (u,))
    return UnitarySequence(tuple(steps))


def apply_unitary(state: QuantumState, u: Unitary) -> QuantumState:
    """Apply a structured unitary (or a sequence of them) to a state or mixture."""
    if isinstance(state, Mixture):
        return Mixture(tuple((w, u.apply(s)) for w, s in state.components))
    return u.apply(state)


# ---------------------------------------------------------------------------
# observables


@dataclass(frozen=True)
class BasisBlock:
    """Projector onto all basis vectors whose indices match ``constraints``.

    ``constraints`` maps a factor position to a required 1-based index;
    unconstrained factors are free.
    """

    constraints: Mapping[int, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "constraints", MappingProxyType({int(f): int(i) for f, i in self.constraints.items()}))

    def __hash__(self) -> int:
        return hash(tuple(sorted(self.constraints.items())))

    def rank(self, shape: Sequence[int]) -> int:
        return math.prod(d for f, d in enumerate(shape) if f not in self.constraints)

    def matches(self, idx: MultiIndex) -> bool:
        return all(idx[f] == i for f, i in self.constraints.items())


@dataclass(frozen=True, eq=False)
class Ray:
    """Rank-one projector onto ``vector``."""

    vector: SparseState


Element = Union[BasisBlock, Ray]


def _weight(element: Element, amps: Mapping[MultiIndex, complex]) -> float:
    """Squared norm of the projection of ``amps`` onto ``element``."""
    if isinstance(element, BasisBlock):
        cons = tuple(element.constraints.items())
        return math.fsum(
            a.real * a.real + a.imag * a.imag for idx, a in amps.items() if all(idx[f] == i for f, i in cons)
        )
    z = _inner(element.vector.amplitudes, amps)
    return z.real * z.real + z.imag * z.imag


def _overlap(e1: Element, e2: Element) -> float:
    if isinstance(e1, BasisBlock) and isinstance(e2, BasisBlock):
        for f, i in e1.constraints.items():
            if f in e2.constraints and e2.constraints[f] != i:
                return 0.0
        return 1.0
    if isinstance(e1, Ray):
        return _weight(e2, e1.vector.amplitudes)
    return _weight(e1, e2.vector.amplitudes)


@dataclass(frozen=True, eq=False)
class ProjectorObservable:
    """Eigenvalue-labelled family of orthogonal projectors.

    The projector for label ``a`` is ``W* (sum of branch elements) W`` where
    ``W`` is the product of ``frame`` (applied in order).  The projectors must
    be mutually orthogonal and their ranks must add up to ``support_rank``
    (the full dimension by default).
    """

    shape: tuple[int, ...]
    branches: tuple[tuple[Hashable, tuple[Element, ...]], ...]
    frame: tuple[Unitary, ...] = ()
    support_rank: int | None = None

    def __post_init__(self) -> None:
        shape = tuple(int(s) for s in self.shape)
        branches = tuple((label, tuple(elems)) for label, elems in self.branches)
        labels = [label for label, _ in branches]
        if len(set(labels)) != len(labels):
            raise ValidationError(f"duplicate eigenvalue labels in {labels}")
        tol = get_policy().exact
        flat: list[tuple[Hashable, Element]] = []
        rank = 0
        for label, elems in branches:
            for el in elems:
                if isinstance(el, Ray):
                    _require_same_shape(el.vector.shape, shape)
                    rank += 1
                else:
                    for f, i in el.constraints.items():
                        if not (0 <= f < len(shape) and 1 <= i <= shape[f]):
                            raise ValidationError(f"block constraint {f}:{i} outside shape {shape}")
                    rank += el.rank(shape)
                flat.append((label, el))
        factor_sets = {
            tuple(sorted(el.constraints)) if isinstance(el, BasisBlock) else None for _, el in flat
        }
        if len(factor_sets) == 1 and None not in factor_sets:
            # blocks on a common factor set are orthogonal iff their index tuples differ
            (fs,) = factor_sets
            keys = [tuple(el.constraints[f] for f in fs) for _, el in flat]
            if len(set(keys)) != len(keys):
                raise NotAProjectorError("two projectors constrain the same basis indices")
            pairs_to_check: Iterable[tuple[int, int]] = ()
        else:
            pairs_to_check = ((p, q) for p in range(len(flat)) for q in range(p + 1, len(flat)))
        for p, q in pairs_to_check:
            ov = _overlap(flat[p][1], flat[q][1])
            if ov > tol:
                raise NotAProjectorError(
                    f"projectors for {flat[p][0]!r} and {flat[q][0]!r} are not orthogonal (overlap {ov:.3e})"
                )
        target = math.prod(shape) if self.support_rank is None else int(self.support_rank)
        if rank != target:
            raise ValidationError(
                f"observable does not resolve its support: total projector rank {rank}, expected {target} "
                f"(missing rank {target - rank})"
            )
        for u in self.frame:
            u._check(shape)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "branches", branches)
        object.__setattr__(self, "frame", tuple(self.frame))

    @property
    def labels(self) -> tuple[Hashable, ...]:
        return tuple(label for label, _ in self.branches)

    def conjugated(self, u: Unitary) -> ProjectorObservable:
        """The observable ``u* X u`` (measure this observable after ``u``)."""
        return replace(self, frame=(u,) + self.frame)

    @classmethod
    def local_basis(
        cls,
        shape: Sequence[int],
        factor: int,
        labels: Sequence[Hashable] | None = None,
        frame: Sequence[Unitary] = (),
    ) -> ProjectorObservable:
        """Complete observable diagonal in the basis of one factor, times identity."""
        shape = tuple(shape)
        d = shape[factor]
        labels = list(labels) if labels is not None else [f"a{k}" for k in range(1, d + 1)]
        if len(labels) != d:
            raise ValidationError(f"need {d} labels, got {len(labels)}")
        return cls(shape, tuple((labels[k - 1], (BasisBlock({factor: k}),)) for k in range(1, d + 1)), tuple(frame))


def _frame_amplitudes(state: SparseState, frame: Sequence[Unitary]) -> Mapping[MultiIndex, complex]:
    amps = state.amplitudes
    for u in frame:
        u._check(state.shape)
        amps = u._apply_raw(amps)
    return amps


def born_distribution(state: QuantumState, obs: ProjectorObservable) -> dict[Hashable, float]:
    """Born-rule outcome probabilities of ``obs`` in ``state``.

    Raises:
        ShapeMismatchError: state and observable live on different spaces.
        ValidationError: the state has weight outside the observable's support.
    """
    if isinstance(state, Mixture):
        out: dict[Hashable, float] = {label: 0.0 for label in obs.labels}
        for w, comp in state.components:
            for label, p in born_distribution(comp, obs).items():
                out[label] += w * p
        return out
    _require_same_shape(state.shape, obs.shape)
    amps = _frame_amplitudes(state, obs.frame)
    probs = {}
    blocks = [(label, el) for label, elems in obs.branches for el in elems if isinstance(el, BasisBlock)]
    if blocks and len(blocks) > 8:
        probs = _block_weights(amps, obs)
    else:
        probs = {label: math.fsum(_weight(el, amps) for el in elems) for label, elems in obs.branches}
    total = math.fsum(probs.values())
    if abs(total - 1.0) > get_policy().aggregate:
        raise ValidationError(f"Born probabilities sum to {total!r}; the state leaves the observable's support")
    return probs


def _block_weights(amps: Mapping[MultiIndex, complex], obs: ProjectorObservable) -> dict[Hashable, float]:
    # one pass over the state: bucket amplitudes by their constrained indices
    acc: dict[Hashable, list[float]] = {label: [] for label in obs.labels}
    by_factors: dict[tuple[int, ...], dict[tuple[int, ...], Hashable]] = {}
    rays: list[tuple[Hashable, Ray]] = []
    for label, elems in obs.branches:
        for el in elems:
            if isinstance(el, Ray):
                rays.append((label, el))
                continue
            fs = tuple(sorted(el.constraints))
            by_factors.setdefault(fs, {})[tuple(el.constraints[f] for f in fs)] = label
    for idx, a in amps.items():
        w = a.real * a.real + a.imag * a.imag
        for fs, table in by_factors.items():
            label = table.get(tuple(idx[f] for f in fs))
            if label is not None:
                acc[label].append(w)
    for label, ray in rays:
        acc[label].append(_weight(ray, amps))
    return {label: math.fsum(v) for label, v in acc.items()}


def projected_weight(state: SparseState, elements: Iterable[Element], frame: Sequence[Unitary] = ()) -> float:
    """``<state| W* P W |state>`` for ``P`` the sum of orthogonal ``elements``."""
    amps = _frame_amplitudes(state, frame)
    return math.fsum(_weight(el, amps) for el in elements)


# ---------------------------------------------------------------------------
# product projectors


@dataclass(frozen=True, eq=False)
class ProductProjector:
    """Tensor product of per-factor projectors; ``None`` stands for identity."""

    factors: tuple[np.ndarray | None, ...]

    def __post_init__(self) -> None:
        tol = get_policy().exact
        mats = []
        for pos, m in enumerate(self.factors):
            if m is None:
                mats.append(None)
                continue
            m = np.array(m, dtype=complex)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise NotAProjectorError(f"factor {pos} is not a square matrix")
            if np.max(np.abs(m - m.conj().T)) > tol or np.max(np.abs(m @ m - m)) > tol:
                raise NotAProjectorError(f"factor {pos} is not an orthogonal projector (P^2 != P or P* != P)")
            m.setflags(write=False)
            mats.append(m)
        object.__setattr__(self, "factors", tuple(mats))

    @classmethod
    def from_vectors(cls, vectors: Sequence[np.ndarray | None]) -> ProductProjector:
        """Build ``[v1] (x) [v2] (x) ...`` from local unit vectors."""
        mats = []
        for v in vectors:
            if v is None:
                mats.append(None)
                continue
            v = np.asarray(v, dtype=complex)
            v = v / np.linalg.norm(v)
            mats.append(np.outer(v, v.conj()))
        return cls(tuple(mats))


def projector_expectation(state: SparseState, projector: ProductProjector) -> float:
    """``<state|P|state>`` for a product projector, as a real number."""
    if len(projector.factors) != len(state.shape):
        raise ShapeMismatchError(f"projector has {len(projector.factors)} factors, state shape is {state.shape}")
    amps: dict[MultiIndex, complex] = dict(state.amplitudes)
    for pos, m in enumerate(projector.factors):
        if m is None:
            continue
        if m.shape[0] != state.shape[pos]:
            raise ShapeMismatchError(f"factor {pos}: projector dimension {m.shape[0]} vs state {state.shape[pos]}")
        out: dict[MultiIndex, complex] = {}
        for idx, a in amps.items():
            col = m[:, idx[pos] - 1]
            for row in np.flatnonzero(col):
                key = idx[:pos] + (int(row) + 1,) + idx[pos + 1 :]
                out[key] = out.get(key, 0j) + col[row] * a
        amps = out
    val = _inner(state.amplitudes, amps)
    if abs(val.imag) > get_policy().exact:
        raise ArithmeticError(f"expectation has imaginary residue {val.imag:.3e}")
    return val.real


def local_vector(u: Unitary, d: int, k: int) -> np.ndarray:
    """Dense image ``u e_k`` of a single-factor unitary on ``C^d``."""
    e_k = SparseState.basis((d,), (k,))
    return (e_k if u is None else u.apply(e_k)).to_dense()


def dense_projector(obs: ProjectorObservable, label: Hashable) -> np.ndarray:
    """Dense matrix of the projector for ``label`` (small spaces only)."""
    branch = dict(obs.branches).get(label)
    if branch is None:
        raise ValidationError(f"observable has no outcome {label!r}")
    dim = math.prod(obs.shape)
    frame_cols = np.zeros((dim, dim), dtype=complex)
    for col, idx in enumerate(np.ndindex(*obs.shape)):
        e = {tuple(i + 1 for i in idx): 1.0 + 0j}
        for key, amp in _frame_amplitudes_raw(e, obs.frame).items():
            frame_cols[np.ravel_multi_index(tuple(i - 1 for i in key), obs.shape), col] = amp
    p0 = np.zeros((dim, dim), dtype=complex)
    for el in branch:
        if isinstance(el, Ray):
            v = el.vector.to_dense()
            p0 += np.outer(v, v.conj())
        else:
            for flat, idx in enumerate(np.ndindex(*obs.shape)):
                if el.matches(tuple(i + 1 for i in idx)):
                    p0[flat, flat] = 1.0
    return frame_cols.conj().T @ p0 @ frame_cols


def _frame_amplitudes_raw(amps, frame):
    for u in frame:
        amps = u._apply_raw(amps)
    return amps
