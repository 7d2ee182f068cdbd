"""Finite ontic models and the checkers built on them.

An ontic model assigns probability vectors over a finite set of ontic states
to preparations, outcome distributions to each ontic state for every
measurement, and stochastic matrices to transformations.  Everything is a
plain numpy array indexed by the position of a label in the ontic space.

Quantum-side quantities are obtained by resolving the string tag carried by
each component in a :class:`QuantumContext`.  Composite tags use ``∘``:
``"A∘U"`` is the observable ``U* A U`` and ``"U∘rho"`` the state ``U rho U*``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Hashable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import PreconditionError, ShapeMismatchError, TagError, ValidationError
from .quantum import (
    BasisBlock,
    Mixture,
    ProjectorObservable,
    QuantumState,
    Ray,
    Rotation,
    SparseState,
    StructuredUnitary,
    Unitary,
    UnitarySequence,
    apply_unitary,
    born_distribution,
    compose,
    fidelity,
    get_policy,
    tensor,
)

COMPOSE = "∘"
TENSOR = "⊗"


# ---------------------------------------------------------------------------
# quantum context


@dataclass(frozen=True, eq=False)
class QuantumContext:
    """Registry of named states, observables and unitaries on one Hilbert space."""

    shape: tuple[int, ...]
    states: Mapping[str, QuantumState] = field(default_factory=dict)
    observables: Mapping[str, ProjectorObservable] = field(default_factory=dict)
    unitaries: Mapping[str, Unitary] = field(default_factory=dict)

    def __post_init__(self) -> None:
        shape = tuple(int(s) for s in self.shape)
        for tag, st in self.states.items():
            if st.shape != shape:
                raise ShapeMismatchError(f"state {tag!r} has shape {st.shape}, context has {shape}")
        for tag, ob in self.observables.items():
            if ob.shape != shape:
                raise ShapeMismatchError(f"observable {tag!r} has shape {ob.shape}, context has {shape}")
        for tag, u in self.unitaries.items():
            u._check(shape)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "states", MappingProxyType(dict(self.states)))
        object.__setattr__(self, "observables", MappingProxyType(dict(self.observables)))
        object.__setattr__(self, "unitaries", MappingProxyType(dict(self.unitaries)))

    def extended(
        self,
        states: Mapping[str, QuantumState] | None = None,
        observables: Mapping[str, ProjectorObservable] | None = None,
        unitaries: Mapping[str, Unitary] | None = None,
    ) -> QuantumContext:
        return QuantumContext(
            self.shape,
            {**self.states, **(states or {})},
            {**self.observables, **(observables or {})},
            {**self.unitaries, **(unitaries or {})},
        )

    def unitary(self, tag: str) -> Unitary:
        if tag in self.unitaries:
            return self.unitaries[tag]
        if COMPOSE in tag:
            later, earlier = tag.split(COMPOSE, 1)
            return compose(self.unitary(earlier), self.unitary(later))
        raise TagError(f"unknown unitary tag {tag!r}")

    def observable(self, tag: str) -> ProjectorObservable:
        if tag in self.observables:
            return self.observables[tag]
        if COMPOSE in tag:
            obs, u = tag.split(COMPOSE, 1)
            return self.observable(obs).conjugated(self.unitary(u))
        raise TagError(f"unknown observable tag {tag!r}")

    def state(self, tag: str) -> QuantumState:
        if tag in self.states:
            return self.states[tag]
        if COMPOSE in tag:
            u, st = tag.rsplit(COMPOSE, 1)
            return apply_unitary(self.state(st), self.unitary(u))
        raise TagError(f"unknown state tag {tag!r}")

    def has_state(self, tag: str) -> bool:
        try:
            self.state(tag)
        except TagError:
            return False
        return True

    def born(self, state_tag: str, obs_tag: str, unitary_tag: str | None = None) -> dict[Hashable, float]:
        """Born probabilities of ``obs_tag`` after evolving ``state_tag`` by ``unitary_tag``."""
        state = self.state(state_tag)
        if unitary_tag is not None:
            state = apply_unitary(state, self.unitary(unitary_tag))
        return born_distribution(state, self.observable(obs_tag))


# ---------------------------------------------------------------------------
# model components


def _stochastic_rows(rows: np.ndarray, what: str) -> np.ndarray:
    arr = np.array(rows, dtype=float)
    if arr.ndim != 2:
        raise ValidationError(f"{what} must be a 2-d array")
    tol = get_policy().exact
    if np.any(arr < -tol):
        r, c = np.argwhere(arr < -tol)[0]
        raise ValidationError(f"{what}: negative entry {arr[r, c]!r} at row {r}, column {c}")
    sums = arr.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if bad.size:
        raise ValidationError(f"{what}: row {bad[0]} sums to {sums[bad[0]]!r}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class OnticSpace:
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        labels = tuple(str(x) for x in self.labels)
        if not labels:
            raise ValidationError("ontic space is empty")
        if len(set(labels)) != len(labels):
            raise ValidationError("ontic state labels must be distinct")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "_pos", {lab: p for p, lab in enumerate(labels)})

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self._pos[label]
        except KeyError:
            raise ValidationError(f"{label!r} is not an ontic state") from None


@dataclass(frozen=True, eq=False)
class PreparationMeasure:
    """Probability vector over ``space``; ``represents`` is a state tag."""

    space: OnticSpace
    weights: np.ndarray
    represents: str

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.shape != (len(self.space),):
            raise ShapeMismatchError(f"measure for {self.represents!r} has {w.size} weights, space has {len(self.space)}")
        _stochastic_rows(w[None, :], f"measure {self.represents!r}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, space: OnticSpace, label: str, represents: str) -> PreparationMeasure:
        w = np.zeros(len(space))
        w[space.index(label)] = 1.0
        return cls(space, w, represents)


@dataclass(frozen=True, eq=False)
class ResponseFunction:
    """Outcome probabilities ``probs[lambda, outcome]``; ``represents`` is an observable tag."""

    space: OnticSpace
    outcomes: tuple[Hashable, ...]
    probs: np.ndarray
    represents: str

    def __post_init__(self) -> None:
        outcomes = tuple(self.outcomes)
        if len(set(outcomes)) != len(outcomes):
            raise ValidationError(f"response {self.represents!r} has duplicate outcomes")
        probs = _stochastic_rows(self.probs, f"response {self.represents!r}")
        if probs.shape != (len(self.space), len(outcomes)):
            raise ShapeMismatchError(
                f"response {self.represents!r} has shape {probs.shape}, expected {(len(self.space), len(outcomes))}"
            )
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "probs", probs)

    def column(self, outcome: Hashable) -> np.ndarray:
        try:
            return self.probs[:, self.outcomes.index(outcome)]
        except ValueError:
            raise ValidationError(f"response {self.represents!r} has no outcome {outcome!r}") from None


@dataclass(frozen=True, eq=False)
class TransformationKernel:
    """Markov kernel ``rows[source, target]``; ``represents`` is a unitary or preparation tag."""

    source: OnticSpace
    target: OnticSpace
    rows: np.ndarray
    represents: str

    def __post_init__(self) -> None:
        rows = _stochastic_rows(self.rows, f"kernel {self.represents!r}")
        if rows.shape != (len(self.source), len(self.target)):
            raise ShapeMismatchError(
                f"kernel {self.represents!r} has shape {rows.shape}, expected {(len(self.source), len(self.target))}"
            )
        object.__setattr__(self, "rows", rows)

    @classmethod
    def identity(cls, space: OnticSpace, represents: str = "1") -> TransformationKernel:
        return cls(space, space, np.eye(len(space)), represents)


@dataclass(frozen=True)
class JointLink:
    """Declares ``joint`` as the joint response for local responses ``local_a`` and ``local_b``."""

    local_a: str
    local_b: str
    joint: str


@dataclass(frozen=True, eq=False)
class OnticModel:
    """Ontic model for one quantum system.

    Several preparations (or responses, kernels) may carry the same tag;
    checkers quantify over every representative.
    """

    space: OnticSpace
    quantum: QuantumContext
    preparations: tuple[PreparationMeasure, ...] = ()
    responses: tuple[ResponseFunction, ...] = ()
    kernels: tuple[TransformationKernel, ...] = ()
    joint_links: tuple[JointLink, ...] = ()
    name: str = ""

    def __post_init__(self) -> None:
        for part in (*self.preparations, *self.responses):
            if part.space != self.space:
                raise ValidationError(f"{part.represents!r} lives on a different ontic space")
        for k in self.kernels:
            if k.source != self.space or k.target != self.space:
                raise ValidationError(f"kernel {k.represents!r} must map the model's space to itself")
        object.__setattr__(self, "preparations", tuple(self.preparations))
        object.__setattr__(self, "responses", tuple(self.responses))
        object.__setattr__(self, "kernels", tuple(self.kernels))
        object.__setattr__(self, "joint_links", tuple(self.joint_links))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.quantum.shape

    def preparations_for(self, tag: str) -> tuple[PreparationMeasure, ...]:
        found = tuple(p for p in self.preparations if p.represents == tag)
        if not found:
            raise TagError(f"model has no preparation tagged {tag!r}")
        return found

    def responses_for(self, tag: str) -> tuple[ResponseFunction, ...]:
        found = tuple(r for r in self.responses if r.represents == tag)
        if not found:
            raise TagError(f"model has no response tagged {tag!r}")
        return found

    def kernels_for(self, tag: str) -> tuple[TransformationKernel, ...]:
        found = tuple(k for k in self.kernels if k.represents == tag)
        if not found:
            raise TagError(f"model has no kernel tagged {tag!r}")
        return found

    def preparation(self, tag: str) -> PreparationMeasure:
        return self.preparations_for(tag)[0]

    def response(self, tag: str) -> ResponseFunction:
        return self.responses_for(tag)[0]

    def kernel(self, tag: str) -> TransformationKernel:
        return self.kernels_for(tag)[0]


@dataclass(frozen=True, eq=False)
class Appender:
    """Kernel ``gamma_P2`` appending an ancilla prepared as ``ancilla_tag``.

    ``lifts`` maps a response tag ``A`` of the source model to the tag of the
    joint response ``A (x) 1``; unlisted tags default to ``"A⊗1"``.
    """

    source: tuple[int, ...]
    target: tuple[int, ...]
    ancilla_tag: str
    kernel: TransformationKernel
    lifts: Mapping[str, str] = field(default_factory=dict)

    def lift(self, resp_tag: str) -> str:
        return self.lifts.get(resp_tag, f"{resp_tag}{TENSOR}1")


@dataclass(frozen=True, eq=False)
class CompleteOnticModel:
    """Family of ontic models keyed by system shape, linked by appenders.

    Construction checks that every appender pushes each preparation tagged
    ``rho1`` to a measure reproducing the joint state ``rho1⊗rho2``.
    """

    models: Mapping[tuple[int, ...], OnticModel]
    appenders: tuple[Appender, ...] = ()

    def __post_init__(self) -> None:
        models = {tuple(k): v for k, v in self.models.items()}
        for key, m in models.items():
            if key != m.shape:
                raise ValidationError(f"model keyed {key} has shape {m.shape}")
        object.__setattr__(self, "models", MappingProxyType(models))
        object.__setattr__(self, "appenders", tuple(self.appenders))
        tol = get_policy().aggregate
        for app in self.appenders:
            if app.source not in models or app.target not in models:
                raise ValidationError(f"appender {app.ancilla_tag!r} links unknown systems {app.source} -> {app.target}")
            if app.kernel.source != models[app.source].space or app.kernel.target != models[app.target].space:
                raise ValidationError(f"appender {app.ancilla_tag!r} kernel does not match the model spaces")
            defect = appender_defect(self, app)
            if defect > tol:
                raise ValidationError(
                    f"appender {app.ancilla_tag!r} does not prepare product states (defect {defect:.3e})"
                )

    @classmethod
    def of(cls, *models: OnticModel, appenders: Iterable[Appender] = ()) -> CompleteOnticModel:
        return cls({m.shape: m for m in models}, tuple(appenders))

    def appender(self, source: Sequence[int], ancilla_tag: str) -> Appender:
        for app in self.appenders:
            if app.source == tuple(source) and app.ancilla_tag == ancilla_tag:
                return app
        raise TagError(f"no appender for system {tuple(source)} with ancilla {ancilla_tag!r}")


def appender_defect(cm: CompleteOnticModel, app: Appender) -> float:
    """Largest reproduction defect of pushed-forward preparations in the joint model."""
    src, tgt = cm.models[app.source], cm.models[app.target]
    worst = 0.0
    for prep in src.preparations:
        joint_tag = f"{prep.represents}{TENSOR}{app.ancilla_tag}"
        if not tgt.quantum.has_state(joint_tag):
            raise TagError(f"joint model cannot resolve {joint_tag!r}")
        pushed = PreparationMeasure(tgt.space, prep.weights @ app.kernel.rows, joint_tag)
        for resp in tgt.responses:
            worst = max(worst, reproduce_defect(tgt, pushed, resp))
    return worst


# ---------------------------------------------------------------------------
# kernel algebra


def compose_response(resp: ResponseFunction, kernel: TransformationKernel) -> ResponseFunction:
    """Response for "measure after transform": ``sum_t p(a|t) gamma(t|s)``, tag ``A∘U``."""
    if kernel.target != resp.space:
        raise ShapeMismatchError("kernel target is not the response's ontic space")
    return ResponseFunction(
        kernel.source, resp.outcomes, kernel.rows @ resp.probs, f"{resp.represents}{COMPOSE}{kernel.represents}"
    )


def push_preparation(kernel: TransformationKernel, prep: PreparationMeasure) -> PreparationMeasure:
    """Pushforward measure ``sum_s gamma(.|s) mu(s)``, tag ``U∘rho``."""
    if kernel.source != prep.space:
        raise ShapeMismatchError("kernel source is not the measure's ontic space")
    return PreparationMeasure(kernel.target, prep.weights @ kernel.rows, f"{kernel.represents}{COMPOSE}{prep.represents}")


def compose_kernels(second: TransformationKernel, first: TransformationKernel) -> TransformationKernel:
    """Kernel of ``second`` after ``first``, tag ``U2∘U1``."""
    if first.target != second.source:
        raise ShapeMismatchError("kernels do not compose: inner target differs from outer source")
    return TransformationKernel(
        first.source, second.target, first.rows @ second.rows, f"{second.represents}{COMPOSE}{first.represents}"
    )


KERNEL_OPS = {
    "measurement∘transform": compose_response,
    "transform∘preparation": push_preparation,
    "transform∘transform": compose_kernels,
}


def kernel_algebra(op: str, outer, inner):
    """Dispatch one of the three finite compositions by name.

    ``op`` is ``"measurement∘transform"`` (response, kernel),
    ``"transform∘preparation"`` (kernel, preparation) or
    ``"transform∘transform"`` (second kernel, first kernel).
    """
    try:
        fn = KERNEL_OPS[op]
    except KeyError:
        raise ValidationError(f"unknown composition {op!r}; expected one of {sorted(KERNEL_OPS)}") from None
    return fn(outer, inner)


# ---------------------------------------------------------------------------
# defect checkers


def _born_row(model: OnticModel, prep_tag: str, resp: ResponseFunction, unitary_tag: str | None = None) -> np.ndarray:
    born = model.quantum.born(prep_tag, resp.represents, unitary_tag)
    if set(born) != set(resp.outcomes):
        raise ValidationError(
            f"response {resp.represents!r} outcomes {sorted(map(str, resp.outcomes))} do not match "
            f"the observable's labels {sorted(map(str, born))}"
        )
    return np.array([born[a] for a in resp.outcomes])


def reproduce_defect(
    model: OnticModel,
    prep: PreparationMeasure,
    resp: ResponseFunction,
    kernel: TransformationKernel | None = None,
) -> float:
    """``max_a |sum_l p(a|l) (gamma* mu)(l) - Born(a)|``; zero iff the model reproduces the triple."""
    mu = prep.weights if kernel is None else prep.weights @ kernel.rows
    predicted = mu @ resp.probs
    born = _born_row(model, prep.represents, resp, None if kernel is None else kernel.represents)
    return float(np.max(np.abs(predicted - born)))


def triviality_defect(model: OnticModel, prep: PreparationMeasure, resp: ResponseFunction) -> float:
    """``max_a sum_l |p(a|l) - Born(a)| mu(l)``, the integral form of triviality."""
    born = _born_row(model, prep.represents, resp)
    return float(np.max(prep.weights @ np.abs(resp.probs - born[None, :])))


def is_trivial(
    model: OnticModel,
    preps: Iterable[PreparationMeasure] | None = None,
    resps: Iterable[ResponseFunction] | None = None,
    tol: float | None = None,
) -> bool:
    tol = get_policy().aggregate if tol is None else tol
    preps = model.preparations if preps is None else tuple(preps)
    resps = model.responses if resps is None else tuple(resps)
    return all(triviality_defect(model, p, r) <= tol for p in preps for r in resps)


def variational_distance(m1: PreparationMeasure, m2: PreparationMeasure) -> float:
    """Half the L1 distance, equal to ``sup_S |m1(S) - m2(S)|`` on a finite space."""
    if m1.space != m2.space:
        raise ShapeMismatchError("measures live on different ontic spaces")
    return 0.5 * math.fsum(np.abs(m1.weights - m2.weights))


def is_psi_ontic(model: OnticModel, tol: float | None = None) -> bool:
    """Every pair of preparations of distinct pure states is perfectly distinguishable."""
    tol = get_policy().aggregate if tol is None else tol
    pure = [(p, model.quantum.state(p.represents)) for p in model.preparations]
    pure = [(p, s) for p, s in pure if isinstance(s, SparseState)]
    for (p1, s1), (p2, s2) in itertools.combinations(pure, 2):
        if fidelity(s1, s2) >= 1.0 - tol:
            continue
        if variational_distance(p1, p2) < 1.0 - tol:
            return False
    return True


def _joint_outcomes(joint: ResponseFunction) -> list[tuple[Hashable, Hashable]]:
    out = []
    for o in joint.outcomes:
        if not (isinstance(o, tuple) and len(o) == 2):
            raise ValidationError(f"joint response {joint.represents!r} outcome {o!r} is not a pair")
        out.append(o)
    return out


def parameter_independence_defect(
    local_a: ResponseFunction, local_b: ResponseFunction, joint: ResponseFunction
) -> float:
    """Largest gap between a local response and the matching marginal of the joint one."""
    if not (local_a.space == local_b.space == joint.space):
        raise ShapeMismatchError("responses live on different ontic spaces")
    pairs = _joint_outcomes(joint)
    a_set = {a for a, _ in pairs}
    b_set = {b for _, b in pairs}
    if a_set != set(local_a.outcomes) or b_set != set(local_b.outcomes):
        raise ValidationError(f"joint response {joint.represents!r} outcomes do not match the local outcome sets")
    worst = 0.0
    for local, side in ((local_a, 0), (local_b, 1)):
        for o in local.outcomes:
            cols = [c for c, pair in enumerate(pairs) if pair[side] == o]
            marginal = joint.probs[:, cols].sum(axis=1)
            worst = max(worst, float(np.max(np.abs(local.column(o) - marginal))))
    return worst


def ancilla_independence_defect(
    cm: CompleteOnticModel, sys_shape: Sequence[int], resp_tag: str, ancilla_tag: str
) -> float:
    """``max |p_A(a|l) - sum_l' p_{A⊗1}(a|l') gamma_P2(l'|l)|`` over all representatives."""
    app = cm.appender(sys_shape, ancilla_tag)
    sys, joint = cm.models[app.source], cm.models[app.target]
    worst = 0.0
    for ra in sys.responses_for(resp_tag):
        for rj in joint.responses_for(app.lift(resp_tag)):
            if set(rj.outcomes) != set(ra.outcomes):
                raise ValidationError(f"{rj.represents!r} and {ra.represents!r} have different outcomes")
            cols = [rj.outcomes.index(a) for a in ra.outcomes]
            averaged = app.kernel.rows @ rj.probs[:, cols]
            worst = max(worst, float(np.max(np.abs(ra.probs - averaged))))
    return worst


class InvarianceRecord(NamedTuple):
    premise_holds: bool
    invariance_defect: float
    satisfied: bool


def unitary_invariance_check(
    model: OnticModel,
    prep: PreparationMeasure,
    kernel: TransformationKernel,
    resp: ResponseFunction,
    outcome: Hashable,
    tol: float | None = None,
) -> InvarianceRecord:
    """Check unitary invariance for one (state, unitary, observable, outcome) tuple."""
    tol = get_policy().aggregate if tol is None else tol
    before = model.quantum.born(prep.represents, resp.represents)
    after = model.quantum.born(prep.represents, resp.represents, kernel.represents)
    if outcome not in before:
        raise ValidationError(f"observable {resp.represents!r} has no outcome {outcome!r}")
    premise = abs(before[outcome] - after[outcome]) <= tol
    p = resp.column(outcome)
    defect = float(prep.weights @ np.abs(p - kernel.rows @ p))
    return InvarianceRecord(premise, defect, (not premise) or defect <= tol)


class VarianceRecord(NamedTuple):
    lhs: float
    rhs: float
    holds: bool


def variance_inequality_check(p: np.ndarray, gamma: np.ndarray, mu: np.ndarray) -> VarianceRecord:
    """Compare ``Var_mu(gamma p)`` with ``Var_{gamma* mu}(p)`` (Jensen)."""
    p = np.asarray(p, dtype=float)
    g = gamma.rows if isinstance(gamma, TransformationKernel) else np.asarray(gamma, dtype=float)
    m = mu.weights if isinstance(mu, PreparationMeasure) else np.asarray(mu, dtype=float)
    if g.shape != (m.size, p.size):
        raise ShapeMismatchError(f"kernel shape {g.shape} does not compose with {m.size} -> {p.size}")
    q = g @ p
    nu = m @ g
    lhs = float(m @ (q * q) - (m @ q) ** 2)
    rhs = float(nu @ (p * p) - (nu @ p) ** 2)
    return VarianceRecord(lhs, rhs, lhs <= rhs + get_policy().exact)


@dataclass(frozen=True)
class MudLines:
    """The four lines of the derivation chain for one outcome.

    ``l0`` is the defect itself, ``l1`` replaces ``p_A`` by its ancilla
    average, ``l2`` moves the absolute value inside the appending kernel and
    ``l3`` is the same quantity written against the pushed-forward measure.
    """

    outcome: Hashable
    l0: float
    l1: float
    l2: float
    l3: float


@dataclass(frozen=True)
class MudReport:
    lines: tuple[MudLines, ...]
    defect: float
    ancilla_defect: float
    precondition_residual: float
    chain_holds: bool


def _mud_lines(mu, g_phi, g_u, p_a, p_joint, outcomes) -> list[MudLines]:
    nu = mu @ g_phi
    out = []
    for c, a in enumerate(outcomes):
        pj = p_joint[:, c]
        evolved = g_u @ pj
        through = g_phi @ evolved
        l0 = float(mu @ np.abs(p_a[:, c] - through))
        l1 = float(mu @ np.abs(g_phi @ pj - through))
        l2 = float(mu @ (g_phi @ np.abs(pj - evolved)))
        l3 = float(nu @ np.abs(pj - evolved))
        out.append(MudLines(a, l0, l1, l2, l3))
    return out


def no_more_mud_check(
    cm: CompleteOnticModel,
    sys_shape: Sequence[int],
    prep_tag: str,
    ancilla_tag: str,
    unitary_tag: str,
    resp_tag: str,
    target_tag: str,
    tol: float | None = None,
) -> MudReport:
    """Evaluate the almost-sure reformulation relating ``p_A`` to ``p_{A⊗1}`` after ``U``.

    The appender for ``ancilla_tag`` supplies ``gamma_phi``, the joint model
    supplies ``gamma_U`` (tag ``unitary_tag``) and ``p_{A⊗1}``.  Every
    combination of representatives is evaluated and the worst one reported.

    Raises:
        PreconditionError: ``U`` does not map the product state onto the
            state tagged ``target_tag``.
    """
    tol = get_policy().aggregate if tol is None else tol
    app = cm.appender(sys_shape, ancilla_tag)
    sys, joint = cm.models[app.source], cm.models[app.target]
    start = joint.quantum.state(f"{prep_tag}{TENSOR}{ancilla_tag}")
    target = joint.quantum.state(target_tag)
    if not isinstance(start, SparseState) or not isinstance(target, SparseState):
        raise PreconditionError("the product state and the target must be pure")
    residual = 1.0 - fidelity(apply_unitary(start, joint.quantum.unitary(unitary_tag)), target)
    if residual > tol:
        raise PreconditionError(
            f"{unitary_tag!r} does not map {prep_tag}{TENSOR}{ancilla_tag} to {target_tag!r} "
            f"(1 - fidelity = {residual:.3e})"
        )
    ai = ancilla_independence_defect(cm, sys_shape, resp_tag, ancilla_tag)
    best: MudReport | None = None
    for prep in sys.preparations_for(prep_tag):
        for ra in sys.responses_for(resp_tag):
            for rj in joint.responses_for(app.lift(resp_tag)):
                cols = [rj.outcomes.index(a) for a in ra.outcomes]
                for gu in joint.kernels_for(unitary_tag):
                    lines = _mud_lines(prep.weights, app.kernel.rows, gu.rows, ra.probs, rj.probs[:, cols], ra.outcomes)
                    slack = tol + ai
                    holds = all(
                        ln.l0 <= ln.l1 + slack and ln.l1 <= ln.l2 + tol and abs(ln.l2 - ln.l3) <= tol for ln in lines
                    )
                    report = MudReport(tuple(lines), max(ln.l0 for ln in lines), ai, residual, holds)
                    if best is None or report.defect > best.defect:
                        best = report
    assert best is not None
    return best


# ---------------------------------------------------------------------------
# built-in models


def orbit_closure(
    context: QuantumContext, seeds: Sequence[str], unitary_tags: Sequence[str], cap: int = 10_000
) -> tuple[QuantumContext, tuple[str, ...]]:
    """Close a list of pure states under unitaries, identifying rays up to phase.

    New states are registered under tags ``"U∘tag"``.  Returns the extended
    context and the tags of the distinct rays, seeds first.
    """
    tags: list[str] = []
    vecs: list[SparseState] = []
    new_states: dict[str, SparseState] = {}

    def known(s: SparseState) -> bool:
        return any(fidelity(s, v) >= 1.0 - get_policy().aggregate for v in vecs)

    queue = []
    for tag in seeds:
        s = context.state(tag)
        if not isinstance(s, SparseState):
            raise ValidationError(f"fragment state {tag!r} is not pure")
        if not known(s):
            tags.append(tag)
            vecs.append(s)
            queue.append(tag)
    while queue:
        tag = queue.pop(0)
        s = vecs[tags.index(tag)]
        for ut in unitary_tags:
            img = apply_unitary(s, context.unitary(ut))
            if known(img):
                continue
            if len(tags) >= cap:
                raise ValidationError(f"orbit exceeds {cap} rays")
            new_tag = f"{ut}{COMPOSE}{tag}"
            tags.append(new_tag)
            vecs.append(img)
            new_states[new_tag] = img
            queue.append(new_tag)
    return context.extended(states=new_states), tuple(tags)


def _ray_index(vecs: Sequence[SparseState], s: SparseState) -> int | None:
    tol = get_policy().aggregate
    for pos, v in enumerate(vecs):
        if fidelity(s, v) >= 1.0 - tol:
            return pos
    return None


def beltrametti_bugajski_model(
    context: QuantumContext,
    fragment: Sequence[str],
    observables: Sequence[str] | None = None,
    unitaries: Sequence[str] = (),
    mixtures: Sequence[str] = (),
    name: str = "beltrametti-bugajski",
) -> OnticModel:
    """Ontic model whose ontic states are the fragment's rays.

    Responses are Born rows, each pure preparation is a Dirac measure, a
    mixture is the matching convex combination, and each unitary acts as
    the deterministic kernel sending a ray to its image.

    Raises:
        ValidationError: a unitary maps a fragment state outside the fragment
            (the message names the escaping state), or a fragment entry is
            not pure.
    """
    observables = list(context.observables) if observables is None else list(observables)
    labels: list[str] = []
    vecs: list[SparseState] = []
    preps: list[PreparationMeasure] = []
    aliases: list[tuple[str, int]] = []
    for tag in fragment:
        s = context.state(tag)
        if not isinstance(s, SparseState):
            raise ValidationError(f"fragment state {tag!r} is not pure")
        pos = _ray_index(vecs, s)
        if pos is None:
            labels.append(tag)
            vecs.append(s)
            pos = len(vecs) - 1
        aliases.append((tag, pos))
    space = OnticSpace(tuple(labels))
    for tag, pos in aliases:
        preps.append(PreparationMeasure.dirac(space, labels[pos], tag))
    for tag in mixtures:
        mix = context.state(tag)
        if not isinstance(mix, Mixture):
            raise ValidationError(f"{tag!r} is not a mixture")
        w = np.zeros(len(space))
        for weight, comp in mix.components:
            pos = _ray_index(vecs, comp)
            if pos is None:
                raise ValidationError(f"mixture {tag!r} has a component outside the fragment")
            w[pos] += weight
        preps.append(PreparationMeasure(space, w, tag))
    responses = []
    for ot in observables:
        obs = context.observable(ot)
        rows = [[born_distribution(v, obs)[a] for a in obs.labels] for v in vecs]
        responses.append(ResponseFunction(space, obs.labels, np.clip(rows, 0.0, 1.0), ot))
    kernels = []
    for ut in unitaries:
        u = context.unitary(ut)
        rows = np.zeros((len(space), len(space)))
        for src, v in enumerate(vecs):
            dst = _ray_index(vecs, apply_unitary(v, u))
            if dst is None:
                raise ValidationError(f"fragment is not closed: {ut}{COMPOSE}{labels[src]} escapes it")
            rows[src, dst] = 1.0
        kernels.append(TransformationKernel(space, space, rows, ut))
    return OnticModel(space, context, tuple(preps), tuple(responses), tuple(kernels), (), name)


def builtin_beltrametti_bugajski(
    context: QuantumContext,
    fragment: Sequence[str],
    observables: Sequence[str] | None = None,
    unitaries: Sequence[str] = (),
    mixtures: Sequence[str] = (),
) -> CompleteOnticModel:
    """Complete model holding the single-system fragment model (see :func:`extend_with_ancilla`)."""
    return CompleteOnticModel.of(beltrametti_bugajski_model(context, fragment, observables, unitaries, mixtures))


def lift_observable(obs: ProjectorObservable, ancilla_dim: int) -> ProjectorObservable:
    """``X (x) 1`` on a space with one extra trailing factor."""
    shape = obs.shape + (ancilla_dim,)
    branches = []
    for label, elems in obs.branches:
        new: list = []
        for el in elems:
            if isinstance(el, BasisBlock):
                new.append(el)
            else:
                new.extend(Ray(tensor(el.vector, SparseState.basis((ancilla_dim,), (k,)))) for k in range(1, ancilla_dim + 1))
        branches.append((label, tuple(new)))
    support = None if obs.support_rank is None else obs.support_rank * ancilla_dim
    return ProjectorObservable(shape, tuple(branches), obs.frame, support)


def extend_with_ancilla(
    cm: CompleteOnticModel,
    sys_shape: Sequence[int],
    ancilla: SparseState,
    ancilla_tag: str,
    joint_unitaries: Mapping[str, Unitary] = MappingProxyType({}),
    joint_states: Mapping[str, QuantumState] = MappingProxyType({}),
    joint_observables: Mapping[str, ProjectorObservable] = MappingProxyType({}),
) -> CompleteOnticModel:
    """Add a Beltrametti–Bugajski joint model and the appender for ``ancilla``.

    Each system observable ``A`` is lifted to ``A⊗1``.  Each system ontic
    state is sent to the ray ``psi⊗ancilla`` of the unique pure state
    ``psi`` whose preparations charge it, so pushforwards of pure
    preparations are Dirac measures on product rays.
    """
    sys = cm.models[tuple(sys_shape)]
    sq = sys.quantum
    if len(ancilla.shape) != 1:
        raise ValidationError("the ancilla must be a single factor")
    dim = ancilla.shape[0]
    shape = sq.shape + (dim,)
    states: dict[str, QuantumState] = {}
    for tag, st in sq.states.items():
        if isinstance(st, SparseState):
            states[f"{tag}{TENSOR}{ancilla_tag}"] = tensor(st, ancilla)
        else:
            states[f"{tag}{TENSOR}{ancilla_tag}"] = Mixture(tuple((w, tensor(s, ancilla)) for w, s in st.components))
    for prep in sys.preparations:
        key = f"{prep.represents}{TENSOR}{ancilla_tag}"
        if key not in states:
            st = sq.state(prep.represents)
            states[key] = (
                tensor(st, ancilla)
                if isinstance(st, SparseState)
                else Mixture(tuple((w, tensor(s, ancilla)) for w, s in st.components))
            )
    states.update(joint_states)
    lifted = {f"{t}{TENSOR}1": lift_observable(o, dim) for t, o in sq.observables.items()}
    lifted.update(joint_observables)
    ctx = QuantumContext(shape, states, lifted, dict(joint_unitaries))
    pure_preps = [p for p in sys.preparations if isinstance(sq.state(p.represents), SparseState)]
    seeds = [f"{p.represents}{TENSOR}{ancilla_tag}" for p in pure_preps]
    seeds += [t for t, s in joint_states.items() if isinstance(s, SparseState)]
    ctx, frag = orbit_closure(ctx, seeds, list(joint_unitaries))
    mixes = [t for t, s in ctx.states.items() if isinstance(s, Mixture)]
    joint = beltrametti_bugajski_model(ctx, frag, list(lifted), list(joint_unitaries), mixes, name="joint")
    vecs = [ctx.state(t) for t in joint.space.labels]
    rows = np.zeros((len(sys.space), len(joint.space)))
    for lam in range(len(sys.space)):
        charged = {p.represents for p in pure_preps if p.weights[lam] > 0}
        rays = {_ray_index(vecs, ctx.state(f"{t}{TENSOR}{ancilla_tag}")) for t in charged}
        if len(rays) > 1:
            raise ValidationError(f"ontic state {sys.space.labels[lam]!r} is charged by distinct pure states")
        rows[lam, rays.pop() if rays else 0] = 1.0
    kernel = TransformationKernel(sys.space, joint.space, rows, ancilla_tag)
    lifts = {r.represents: f"{r.represents}{TENSOR}1" for r in sys.responses}
    app = Appender(sys.shape, shape, ancilla_tag, kernel, lifts)
    return CompleteOnticModel({**cm.models, shape: joint}, (*cm.appenders, app))


def _check_schmidt(c: Sequence[float]) -> list[float]:
    c = [float(x) for x in c]
    if not c or any(x <= 0 for x in c):
        raise ValidationError("Schmidt weights must be strictly positive (strip zeros first)")
    defect = math.fsum(x * x for x in c) - 1.0
    if abs(defect) > get_policy().exact:
        raise ValidationError(f"Schmidt weights not normalized: sum of squares deviates from 1 by {defect:.3e}")
    return c


def cyclic_shift(d: int, factor: int = 0, label: str = "X") -> StructuredUnitary:
    """``e_k -> e_{k+1 mod d}`` on one factor."""
    return StructuredUnitary((factor,), (d,), {(k,): (k % d + 1,) for k in range(1, d + 1)}, (), label)


def builtin_deterministic_model(c: Sequence[float], obs_tag: str = "A") -> OnticModel:
    """Non-trivial single-system model for ``psi_1 = sum_i c_i e_i``.

    Ontic states are the outcomes; the preparation puts weight ``c_i^2`` on
    ``l_i`` and ``l_i`` answers ``a_i`` with certainty.  A kernel for the
    cyclic shift ``X`` permutes the ontic states accordingly.
    """
    c = _check_schmidt(c)
    d = len(c)
    labels = tuple(f"l{i}" for i in range(1, d + 1))
    outcomes = tuple(f"a{i}" for i in range(1, d + 1))
    psi = SparseState((d,), {(i + 1,): x for i, x in enumerate(c)})
    ctx = QuantumContext(
        (d,),
        {"psi_1": psi},
        {obs_tag: ProjectorObservable.local_basis((d,), 0, outcomes)},
        {"X": cyclic_shift(d)},
    )
    space = OnticSpace(labels)
    prep = PreparationMeasure(space, np.array(c) ** 2, "psi_1")
    resp = ResponseFunction(space, outcomes, np.eye(d), obs_tag)
    shift = TransformationKernel(space, space, np.roll(np.eye(d), 1, axis=1), "X")
    return OnticModel(space, ctx, (prep,), (resp,), (shift,), (), "deterministic")


def qubit_fragment_context(c: Sequence[float], obs_tag: str = "A") -> QuantumContext:
    """``psi_1 = sum_i c_i e_i`` together with the basis states and the diagonal observable."""
    c = _check_schmidt(c)
    d = len(c)
    states: dict[str, QuantumState] = {"psi_1": SparseState((d,), {(i + 1,): x for i, x in enumerate(c)})}
    for i in range(1, d + 1):
        states[f"e{i}"] = SparseState.basis((d,), (i,))
    labels = tuple(f"a{i}" for i in range(1, d + 1))
    return QuantumContext((d,), states, {obs_tag: ProjectorObservable.local_basis((d,), 0, labels)})


def entangling_extension(cm: CompleteOnticModel, c: Sequence[float], ancilla_tag: str = "phi") -> CompleteOnticModel:
    """Append the ancilla ``e_1`` and the map ``CX: e_i (x) e_1 -> e_i (x) e_i``.

    ``CX`` sends ``psi_1 (x) e_1`` to the Schmidt state registered as
    ``psi_S``; the joint model is of Beltrametti–Bugajski type.
    """
    c = _check_schmidt(c)
    d = len(c)
    sys_shape = (d,)
    if sys_shape not in cm.models:
        raise ValidationError(f"complete model has no system of shape {sys_shape}")
    cx = StructuredUnitary.from_partial_map((0, 1), (d, d), {(i, 1): (i, i) for i in range(1, d + 1)}, "CX")
    psi_s = SparseState((d, d), {(i + 1, i + 1): x for i, x in enumerate(c)})
    return extend_with_ancilla(cm, sys_shape, SparseState.basis((d,), (1,)), ancilla_tag, {"CX": cx}, {"psi_S": psi_s})


def rotation_orbit_model(d: int = 2, theta: float = math.pi / 4, i: int = 1, j: int = 2) -> OnticModel:
    """Beltrametti–Bugajski model of the orbit of ``e_i`` under one Givens rotation.

    The observable ``A`` is diagonal and ``R`` rotates ``e_i`` towards
    ``e_j`` by ``theta``.
    """
    if not (1 <= i <= d and 1 <= j <= d and i != j):
        raise ValidationError(f"need distinct indices in 1..{d}, got {i}, {j}")
    rot = StructuredUnitary((0,), (d,), {}, (Rotation((i,), (j,), theta),), "R")
    ctx = QuantumContext(
        (d,),
        {"e": SparseState.basis((d,), (i,))},
        {"A": ProjectorObservable.local_basis((d,), 0, [f"a{k}" for k in range(1, d + 1)])},
        {"R": rot},
    )
    ctx, frag = orbit_closure(ctx, ["e"], ["R"])
    return beltrametti_bugajski_model(ctx, frag, ["A"], ["R"], name="rotation-orbit")
