"""Chained Bell estimate for the maximally entangled pair.

The quarter turn ``[0, pi/2]`` is cut into ``2N+1`` equal steps.  Local
observables ``A_theta`` (first factor) and ``B_phi`` (second factor) are
rotated copies of the computational basis measurement, rotated in the
``(e_i, e_j)`` plane.  For a parameter-independent model every consecutive
pair along the ladder costs at most the quantum cross term
``2 sin^2(phi - theta) / d``, which sums to ``pi^2 / (2 d (2N+1))``.

Ladder angles are kept as :class:`fractions.Fraction` in units of ``pi/2``
so that tags are exact and the gap structure can be checked exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Hashable, NamedTuple, Sequence

import numpy as np

from .errors import OracleMismatchError, ParameterIndependenceError, TagError, ValidationError
from .ontic import (
    JointLink,
    OnticModel,
    OnticSpace,
    PreparationMeasure,
    QuantumContext,
    ResponseFunction,
    TransformationKernel,
    beltrametti_bugajski_model,
    parameter_independence_defect,
)
from .quantum import (
    BasisBlock,
    ProductProjector,
    ProjectorObservable,
    Rotation,
    StructuredUnitary,
    UnitarySequence,
    dense_projector,
    get_policy,
    local_vector,
    maximally_entangled,
    projector_expectation,
)

PREP_TAG = "psi_d"


def _angle(units: Fraction) -> float:
    return float(units) * math.pi / 2


def rotation_unitary(d: int, i: int, j: int, theta: float, factor: int = 0, label: str = "") -> StructuredUnitary:
    """Givens rotation ``e_i -> cos e_i + sin e_j``, ``e_j -> cos e_j - sin e_i`` on one factor."""
    if i == j:
        raise ValidationError("rotation plane needs two distinct indices")
    if not (1 <= i <= d and 1 <= j <= d):
        raise ValidationError(f"indices ({i}, {j}) outside 1..{d}")
    return StructuredUnitary((factor,), (d,), {}, (Rotation((i,), (j,), theta),), label)


def cross_expectation(d: int, i: int, j: int, theta: float, phi: float) -> float:
    """``<psi_d| [U_theta e_i (x) U_phi e_j] |psi_d>`` in closed form, checked against the oracle.

    Raises:
        OracleMismatchError: the closed form and the sparse evaluation differ
            by more than the aggregate tolerance.
    """
    closed = math.sin(phi - theta) ** 2 / d
    u_t = rotation_unitary(d, i, j, theta)
    u_p = rotation_unitary(d, i, j, phi)
    proj = ProductProjector.from_vectors([local_vector(u_t, d, i), local_vector(u_p, d, j)])
    oracle = projector_expectation(maximally_entangled(d), proj)
    if abs(closed - oracle) > get_policy().aggregate:
        raise OracleMismatchError(f"cross term closed form {closed!r} vs oracle {oracle!r}", closed, oracle)
    return closed


class ChainedBound(NamedTuple):
    bound: float
    unsimplified: float


def chained_bound(d: int, N: int) -> ChainedBound:
    """``pi^2 / (2 d (2N+1))`` together with ``(2N+1) (2/d) sin^2(pi / (2(2N+1)))``."""
    if d < 2 or N < 0:
        raise ValidationError("need d >= 2 and N >= 0")
    steps = 2 * N + 1
    bound = math.pi**2 / (2 * d * steps)
    raw = steps * (2.0 / d) * math.sin(math.pi / (2 * steps)) ** 2
    assert raw <= bound + 1e-15, (raw, bound)
    return ChainedBound(bound, raw)


@dataclass(frozen=True)
class RotationLadder:
    """Angles of the chained estimate, in units of ``pi/2``.

    ``a_angles[n] = 2n/(2N+1)`` and ``b_angles[n] = (2n+1)/(2N+1)`` so the
    sequence ``A_0, B_0, A_1, ..., A_N, B_N`` climbs from 0 to 1 in steps of
    ``1/(2N+1)``.
    """

    d: int
    i: int
    j: int
    N: int

    def __post_init__(self) -> None:
        if self.i == self.j or not (1 <= self.i <= self.d and 1 <= self.j <= self.d):
            raise ValidationError(f"bad outcome pair ({self.i}, {self.j}) for d = {self.d}")
        if self.N < 0:
            raise ValidationError("N must be nonnegative")

    @property
    def steps(self) -> int:
        return 2 * self.N + 1

    @property
    def a_angles(self) -> tuple[Fraction, ...]:
        return tuple(Fraction(2 * n, self.steps) for n in range(self.N + 1))

    @property
    def b_angles(self) -> tuple[Fraction, ...]:
        return tuple(Fraction(2 * n + 1, self.steps) for n in range(self.N + 1))

    def sequence(self) -> list[Fraction]:
        out = []
        for a, b in zip(self.a_angles, self.b_angles):
            out += [a, b]
        return out

    def rungs(self) -> list[tuple[Fraction, Fraction]]:
        """(A angle, B angle) pairs in chain order: ``(A_n, B_n)`` then ``(A_{n+1}, B_n)``."""
        a, b = self.a_angles, self.b_angles
        out = []
        for n in range(self.N + 1):
            out.append((a[n], b[n]))
            if n < self.N:
                out.append((a[n + 1], b[n]))
        return out

    def a_tag(self, angle: Fraction) -> str:
        return f"A[{self.i},{self.j}]@{angle}"

    def b_tag(self, angle: Fraction) -> str:
        return f"B[{self.i},{self.j}]@{angle}"

    def joint_tag(self, a: Fraction, b: Fraction) -> str:
        return f"{self.a_tag(a)}*{self.b_tag(b)}"


def a_labels(d: int) -> tuple[str, ...]:
    return tuple(f"a{k}" for k in range(1, d + 1))


def b_labels(d: int) -> tuple[str, ...]:
    return tuple(f"b{k}" for k in range(1, d + 1))


def ladder_context(ladder: RotationLadder) -> tuple[QuantumContext, list[JointLink]]:
    """Quantum context with ``psi_d``, every ladder observable and the joint ones."""
    d, i, j = ladder.d, ladder.i, ladder.j
    shape = (d, d)
    unitaries: dict[str, StructuredUnitary] = {}

    def frame(angle: Fraction, factor: int) -> StructuredUnitary:
        tag = f"R[{i},{j}]@-{angle}#{factor}"
        if tag not in unitaries:
            unitaries[tag] = rotation_unitary(d, i, j, -_angle(angle), factor, tag)
        return unitaries[tag]

    observables: dict[str, ProjectorObservable] = {}
    for ang in ladder.a_angles:
        observables[ladder.a_tag(ang)] = ProjectorObservable.local_basis(shape, 0, a_labels(d), (frame(ang, 0),))
    for ang in ladder.b_angles:
        observables[ladder.b_tag(ang)] = ProjectorObservable.local_basis(shape, 1, b_labels(d), (frame(ang, 1),))
    links = []
    for a, b in dict.fromkeys(ladder.rungs() + [(Fraction(0), Fraction(1))]):
        branches = tuple(
            ((f"a{k}", f"b{l}"), (BasisBlock({0: k, 1: l}),)) for k in range(1, d + 1) for l in range(1, d + 1)
        )
        observables[ladder.joint_tag(a, b)] = ProjectorObservable(shape, branches, (frame(a, 0), frame(b, 1)))
        links.append(JointLink(ladder.a_tag(a), ladder.b_tag(b), ladder.joint_tag(a, b)))
    # U_theta (x) U_theta leaves psi_d invariant; registering these makes the
    # fragment {psi_d} closed under the ladder rotations
    for ang in ladder.sequence():
        halves = tuple(rotation_unitary(d, i, j, _angle(ang), f, f"R[{i},{j}]@{ang}#{f}") for f in (0, 1))
        for h in halves:
            unitaries[h.label] = h
        unitaries[f"R[{i},{j}]@{ang}#both"] = UnitarySequence(halves, f"R[{i},{j}]@{ang}#both")
    ctx = QuantumContext(shape, {PREP_TAG: maximally_entangled(d)}, observables, unitaries)
    return ctx, links


def ladder_bb_model(d: int, N: int, i: int = 1, j: int = 2) -> OnticModel:
    """Beltrametti–Bugajski model of ``psi_d`` carrying every ladder response."""
    ladder = RotationLadder(d, i, j, N)
    ctx, links = ladder_context(ladder)
    both = [t for t in ctx.unitaries if t.endswith("#both")]
    model = beltrametti_bugajski_model(ctx, [PREP_TAG], None, both, name="ladder-bb")
    return OnticModel(model.space, ctx, model.preparations, model.responses, model.kernels, tuple(links), model.name)


def local_deterministic_model(d: int, N: int, i: int = 1, j: int = 2) -> OnticModel:
    """Parameter-independent model in which ``l_k`` answers ``k`` to every ladder observable.

    It reproduces every single-site Born probability of ``psi_d`` but not the
    rotated correlations, so its chain check must fail.
    """
    ladder = RotationLadder(d, i, j, N)
    ctx, links = ladder_context(ladder)
    space = OnticSpace(tuple(f"l{k}" for k in range(1, d + 1)))
    prep = PreparationMeasure(space, np.full(d, 1.0 / d), PREP_TAG)
    resps = []
    eye = np.eye(d)
    for ang in ladder.a_angles:
        resps.append(ResponseFunction(space, a_labels(d), eye, ladder.a_tag(ang)))
    for ang in ladder.b_angles:
        resps.append(ResponseFunction(space, b_labels(d), eye, ladder.b_tag(ang)))
    for link in links:
        obs = ctx.observable(link.joint)
        rows = np.array([[1.0 if lab == (f"a{k}", f"b{k}") else 0.0 for lab in obs.labels] for k in range(1, d + 1)])
        resps.append(ResponseFunction(space, obs.labels, rows, link.joint))
    return OnticModel(space, ctx, (prep,), tuple(resps), (), tuple(links), "local-deterministic")


# ---------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class ChainTerm:
    """One link of the chain.

    ``value`` is the model's ``sum_l |p_X(x|l) - p_Y(y|l)| mu(l)``;
    ``pi_bound`` the parameter-independence estimate through the joint
    response; ``quantum`` the same joint sum evaluated by the Born rule and
    ``closed_form`` its analytic value.
    """

    name: str
    theta: Fraction
    phi: Fraction
    value: float
    pi_bound: float
    quantum: float
    closed_form: float


@dataclass(frozen=True)
class ChainLine:
    name: str
    lhs: float
    rhs: float
    holds: bool


@dataclass(frozen=True)
class ChainReport:
    d: int
    N: int
    i: int
    j: int
    lhs: float
    terms: tuple[ChainTerm, ...]
    bound: float
    lines: tuple[ChainLine, ...]

    @property
    def failed_line(self) -> str | None:
        for line in self.lines:
            if not line.holds:
                return line.name
        return None

    @property
    def passed(self) -> bool:
        return self.failed_line is None


def _find_link(model: OnticModel, joint_tag: str) -> JointLink:
    for link in model.joint_links:
        if link.joint == joint_tag:
            return link
    raise TagError(f"model has no joint link for {joint_tag!r}")


def verify_equiprobability(model: OnticModel, d: int, N: int, i: int = 1, j: int = 2) -> ChainReport:
    """Evaluate every line of the chained estimate on a model of ``psi_d``.

    Each representative preparation tagged ``psi_d`` is checked; the report
    describes the first one that fails (or the last one if all pass).

    Raises:
        ParameterIndependenceError: a rung's joint response does not have the
            declared local responses as marginals.
        TagError: a ladder response or joint link is missing.
    """
    ladder = RotationLadder(d, i, j, N)
    pi_tol = get_policy().exact
    tol = get_policy().oracle
    ai, bi, aj = f"a{i}", f"b{i}", f"a{j}"
    needed = dict.fromkeys(ladder.rungs() + [(Fraction(0), Fraction(1))])
    joint: dict[tuple[Fraction, Fraction], tuple] = {}
    for a, b in needed:
        tag = ladder.joint_tag(a, b)
        link = _find_link(model, tag)
        ra, rb, rj = model.response(link.local_a), model.response(link.local_b), model.response(tag)
        defect = parameter_independence_defect(ra, rb, rj)
        if defect > pi_tol:
            raise ParameterIndependenceError(f"rung {tag} violates parameter independence by {defect:.3e}", tag, defect)
        quantum = model.quantum.born(PREP_TAG, tag)
        joint[(a, b)] = (ra, rb, rj, quantum)

    report = None
    for prep in model.preparations_for(PREP_TAG):
        mu = prep.weights
        terms = []
        for a, b in ladder.rungs():
            ra, rb, rj, q = joint[(a, b)]
            value = float(mu @ np.abs(ra.column(ai) - rb.column(bi)))
            pairs = [(ai, f"b{k}") for k in range(1, d + 1) if k != i] + [(f"a{l}", bi) for l in range(1, d + 1) if l != i]
            pi_bound = float(sum(mu @ rj.column(p) for p in pairs))
            quantum = math.fsum(q[p] for p in pairs)
            closed = 2 * cross_expectation(d, i, j, _angle(a), _angle(b))
            terms.append(ChainTerm(f"A@{a}|B@{b}", a, b, value, pi_bound, quantum, closed))
        ra, rb, rj, q = joint[(Fraction(0), Fraction(1))]
        value = float(mu @ np.abs(rb.column(bi) - ra.column(aj)))
        pairs = [(f"a{k}", bi) for k in range(1, d + 1) if k != j] + [(aj, f"b{l}") for l in range(1, d + 1) if l != i]
        pi_bound = float(sum(mu @ rj.column(p) for p in pairs))
        quantum = math.fsum(q[p] for p in pairs)
        terms.append(ChainTerm("B@1|A@0", Fraction(0), Fraction(1), value, pi_bound, quantum, 0.0))

        a0 = model.response(ladder.a_tag(Fraction(0)))
        lhs = float(mu @ np.abs(a0.column(ai) - a0.column(aj)))
        bound, raw = chained_bound(d, N)
        lines = [ChainLine("triangle", lhs, math.fsum(t.value for t in terms), False)]
        for t in terms:
            lines.append(ChainLine(f"parameter-independence[{t.name}]", t.value, t.pi_bound, False))
            lines.append(ChainLine(f"reproduction[{t.name}]", t.pi_bound, t.quantum, False))
            lines.append(ChainLine(f"closed-form[{t.name}]", t.quantum, t.closed_form, False))
        lines.append(ChainLine("sin-sum", math.fsum(t.closed_form for t in terms), raw, False))
        lines.append(ChainLine("sin-bound", raw, bound, False))
        lines.append(ChainLine("bound", lhs, bound, False))
        checked = []
        for ln in lines:
            if ln.name.startswith(("reproduction", "closed-form", "sin-sum")):
                ok = abs(ln.lhs - ln.rhs) <= tol
            else:
                ok = ln.lhs <= ln.rhs + tol
            checked.append(ChainLine(ln.name, ln.lhs, ln.rhs, ok))
        report = ChainReport(d, N, i, j, lhs, tuple(terms), bound, tuple(checked))
        if not report.passed:
            break
    assert report is not None
    return report


# ---------------------------------------------------------------------------
# degenerate observables


@dataclass(frozen=True)
class CoarseTerm:
    outcome: Hashable
    degeneracy: int
    born: float
    defect: float
    correlation_term: float
    equiprobability_term: float
    holds: bool


def nonmaximal_reduction(
    model: OnticModel,
    a_tag: str,
    b_tag: str,
    refinement: dict[Hashable, Sequence[Hashable]],
    prep_tag: str = PREP_TAG,
) -> tuple[CoarseTerm, ...]:
    """Split the defect of a degenerate ``A (x) 1`` through a complete ``1 (x) B``.

    ``refinement`` assigns to each outcome of ``A`` the outcomes of ``B``
    whose mirrored projectors add up to the ``A`` projector.

    Raises:
        ValidationError: ``B`` does not refine ``A`` in this sense.
    """
    ctx = model.quantum
    d = ctx.shape[0]
    if ctx.shape != (d, d):
        raise ValidationError("the reduction needs a pair of equal factors")
    obs_a, obs_b = ctx.observable(a_tag), ctx.observable(b_tag)
    used = [b for group in refinement.values() for b in group]
    if sorted(map(str, used)) != sorted(map(str, obs_b.labels)) or len(set(used)) != len(used):
        raise ValidationError("refinement groups must partition the outcomes of B")
    if set(refinement) != set(obs_a.labels):
        raise ValidationError("refinement must list every outcome of A")
    tol = get_policy().aggregate
    out = []
    born_a = ctx.born(prep_tag, a_tag)
    for prep in model.preparations_for(prep_tag):
        mu = prep.weights
        ra, rb = model.response(a_tag), model.response(b_tag)
        for a, group in refinement.items():
            pa = dense_projector(obs_a, a)
            mirrored = sum(_mirror(dense_projector(obs_b, b), d) for b in group)
            if np.max(np.abs(pa - mirrored)) > tol:
                raise ValidationError(f"B does not refine A at outcome {a!r}")
            n_k = int(round(np.trace(pa).real / d))
            pb_sum = sum(rb.column(b) for b in group)
            defect = float(mu @ np.abs(ra.column(a) - n_k / d))
            t1 = float(mu @ np.abs(ra.column(a) - pb_sum))
            t2 = float(mu @ np.abs(pb_sum - len(group) / d))
            out.append(CoarseTerm(a, n_k, born_a[a], defect, t1, t2, defect <= t1 + t2 + tol))
    return tuple(out)


def _mirror(p: np.ndarray, d: int) -> np.ndarray:
    # (1 (x) X) psi_d = (X^T (x) 1) psi_d, and X^T = conj(X) for Hermitian X
    return np.conj(p.reshape(d, d, d, d).transpose(1, 0, 3, 2).reshape(d * d, d * d))
