from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onticlab.errors import PreconditionError, ShapeMismatchError, TagError, ValidationError
from onticlab.ontic import (
    Appender,
    CompleteOnticModel,
    OnticModel,
    OnticSpace,
    PreparationMeasure,
    QuantumContext,
    ResponseFunction,
    TransformationKernel,
    ancilla_independence_defect,
    builtin_beltrametti_bugajski,
    builtin_deterministic_model,
    compose_kernels,
    cyclic_shift,
    entangling_extension,
    extend_with_ancilla,
    is_psi_ontic,
    is_trivial,
    kernel_algebra,
    lift_observable,
    no_more_mud_check,
    parameter_independence_defect,
    push_preparation,
    qubit_fragment_context,
    reproduce_defect,
    rotation_orbit_model,
    triviality_defect,
    unitary_invariance_check,
    variance_inequality_check,
    variational_distance,
)
from onticlab.quantum import (
    ProjectorObservable,
    Rotation,
    SparseState,
    StructuredUnitary,
    numeric_policy,
    tensor,
)

import oracles

HALF = (1 / math.sqrt(2), 1 / math.sqrt(2))
THIRDS = (math.sqrt(1 / 3), math.sqrt(2 / 3))


def sq(c):
    return tuple(x * x for x in c)


def bb_qubit(c=THIRDS):
    cm = builtin_beltrametti_bugajski(qubit_fragment_context(c), ["psi_1", "e1", "e2"])
    return cm, cm.models[(len(c),)]


def all_pairs(model):
    return [(p, r) for p in model.preparations for r in model.responses]


def stochastic(rng, n, m):
    rows = rng.random((n, m)) ** 3
    return rows / rows.sum(axis=1, keepdims=True)


@st.composite
def prob_vectors(draw, n):
    w = np.array(draw(st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n))) + 1e-3
    return w / w.sum()


@st.composite
def kernels(draw, n, m):
    return np.vstack([draw(prob_vectors(m)) for _ in range(n)])


# --------------------------------------------------------------------------
# model components


def test_components_validate():
    space = OnticSpace(("x", "y"))
    with pytest.raises(ValidationError):
        OnticSpace(("x", "x"))
    with pytest.raises(ValidationError):
        OnticSpace(())
    with pytest.raises(ValidationError):
        PreparationMeasure(space, [0.5, 0.6], "p")
    with pytest.raises(ValidationError):
        PreparationMeasure(space, [1.5, -0.5], "p")
    with pytest.raises(ShapeMismatchError):
        PreparationMeasure(space, [1.0], "p")
    with pytest.raises(ValidationError):
        ResponseFunction(space, ("a", "b"), [[1, 0], [0.5, 0.4]], "A")
    with pytest.raises(ValidationError):
        TransformationKernel(space, space, [[1, 0], [0.2, 0.9]], "U")


# --------------------------------------------------------------------------
# reproduction


def test_bb_fragment_reproduces_quantum_mechanics():
    _, model = bb_qubit()
    for prep, resp in all_pairs(model):
        assert reproduce_defect(model, prep, resp) <= 1e-12


def test_deterministic_model_reproduces():
    model = builtin_deterministic_model(HALF)
    assert reproduce_defect(model, model.preparation("psi_1"), model.response("A")) <= 1e-12


@pytest.mark.parametrize("delta", [1e-9, 1e-3, 0.25])
def test_corrupted_row_defect_equals_corruption(delta):
    _, model = bb_qubit()
    resp = model.response("A")
    rows = resp.probs.copy()
    lam = model.space.index("e1")
    rows[lam] = [1 - delta, delta]
    bad = ResponseFunction(model.space, resp.outcomes, rows, "A")
    assert reproduce_defect(model, model.preparation("e1"), bad) == pytest.approx(delta, rel=1e-6, abs=1e-15)


def test_reproduce_unknown_tag():
    _, model = bb_qubit()
    resp = ResponseFunction(model.space, ("a1", "a2"), model.response("A").probs, "Z")
    with pytest.raises(TagError):
        reproduce_defect(model, model.preparation("e1"), resp)


# --------------------------------------------------------------------------
# kernel algebra


def test_identity_kernel_leaves_response_alone():
    _, model = bb_qubit()
    resp = model.response("A")
    out = kernel_algebra("measurement∘transform", resp, TransformationKernel.identity(model.space, "I"))
    np.testing.assert_array_equal(out.probs, resp.probs)
    assert out.represents == "A∘I"


def test_dirac_pushforward_is_kernel_row():
    rng = np.random.default_rng(3)
    space = OnticSpace(tuple("abcd"))
    k = TransformationKernel(space, space, stochastic(rng, 4, 4), "U")
    for lab in space.labels:
        pushed = kernel_algebra("transform∘preparation", k, PreparationMeasure.dirac(space, lab, "rho"))
        np.testing.assert_allclose(pushed.weights, k.rows[space.index(lab)], atol=1e-15)
        assert pushed.represents == "U∘rho"


def test_permutation_kernels_compose_like_permutations():
    space = OnticSpace(tuple("abcde"))
    p1, p2 = [1, 2, 0, 4, 3], [4, 3, 2, 1, 0]
    k1 = TransformationKernel(space, space, np.eye(5)[p1], "U1")
    k2 = TransformationKernel(space, space, np.eye(5)[p2], "U2")
    both = kernel_algebra("transform∘transform", k2, k1)
    assert both.represents == "U2∘U1"
    want = np.eye(5)[[p2[p1[s]] for s in range(5)]]
    np.testing.assert_array_equal(both.rows, want)


def test_kernel_algebra_space_mismatch():
    a, b = OnticSpace(("x", "y")), OnticSpace(("x", "y", "z"))
    k = TransformationKernel(a, b, [[1, 0, 0], [0, 1, 0]], "U")
    with pytest.raises(ShapeMismatchError):
        compose_kernels(k, k)
    with pytest.raises(ShapeMismatchError):
        push_preparation(k, PreparationMeasure.dirac(b, "z", "rho"))
    with pytest.raises(ValidationError):
        kernel_algebra("transform∘measurement", k, k)


@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_stochasticity_closure(n, seed):
    rng = np.random.default_rng(seed)
    space = OnticSpace(tuple(f"l{i}" for i in range(n)))
    k1 = TransformationKernel(space, space, stochastic(rng, n, n), "U1")
    k2 = TransformationKernel(space, space, stochastic(rng, n, n), "U2")
    resp = ResponseFunction(space, ("a", "b", "c"), stochastic(rng, n, 3), "A")
    prep = PreparationMeasure(space, stochastic(rng, 1, n)[0], "rho")
    outs = [
        kernel_algebra("transform∘transform", k2, k1).rows,
        kernel_algebra("measurement∘transform", resp, k1).probs,
        kernel_algebra("transform∘preparation", k1, prep).weights[None, :],
    ]
    for arr in outs:
        assert np.all(arr >= 0)
        np.testing.assert_allclose(arr.sum(axis=1), 1.0, atol=1e-12)


# --------------------------------------------------------------------------
# triviality and psi-onticity


def test_bb_fragment_is_trivial():
    _, model = bb_qubit()
    for prep, resp in all_pairs(model):
        assert triviality_defect(model, prep, resp) <= 1e-12
    assert is_trivial(model)


@pytest.mark.parametrize(
    "c_sq,expected",
    [((0.5, 0.5), 0.5), ((1 / 3, 2 / 3), 4 / 9), ((0.1, 0.9), 0.18)],
)
def test_deterministic_triviality_defect(c_sq, expected):
    model = builtin_deterministic_model([math.sqrt(x) for x in c_sq])
    prep, resp = model.preparation("psi_1"), model.response("A")
    # sum_i mu(l_i) |delta_{i1} - c_1^2|
    direct = sum(w * abs((i == 0) - c_sq[0]) for i, w in enumerate(c_sq))
    assert triviality_defect(model, prep, resp) == pytest.approx(expected, abs=1e-12)
    assert direct == pytest.approx(expected, abs=1e-12)
    assert not is_trivial(model)


def test_single_outcome_model_is_trivial():
    model = builtin_deterministic_model([1.0])
    assert triviality_defect(model, model.preparation("psi_1"), model.response("A")) == 0.0


def test_concentrated_born_exact_measure_is_trivial():
    _, model = bb_qubit()
    # the psi_1 ray carries Born probabilities as its own response row
    assert triviality_defect(model, model.preparation("psi_1"), model.response("A")) <= 1e-15


def test_degenerate_weights_rejected():
    with pytest.raises(ValidationError):
        builtin_deterministic_model([1.0, 0.0])
    with pytest.raises(ValidationError):
        builtin_deterministic_model([0.5, 0.5])


def test_variational_distance_examples():
    space = OnticSpace(("l1", "l2"))
    d1, d2 = PreparationMeasure.dirac(space, "l1", "x"), PreparationMeasure.dirac(space, "l2", "y")
    assert variational_distance(d1, d2) == 1.0
    assert variational_distance(d1, d1) == 0.0
    m1 = PreparationMeasure(space, [0.7, 0.3], "x")
    m2 = PreparationMeasure(space, [0.2, 0.8], "y")
    assert variational_distance(m1, m2) == pytest.approx(0.5, abs=1e-15)
    assert oracles.vd_subsets([0.7, 0.3], [0.2, 0.8]) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ShapeMismatchError):
        variational_distance(m1, PreparationMeasure.dirac(OnticSpace(("z",)), "z", "z"))


@given(st.integers(1, 12).flatmap(lambda n: st.tuples(prob_vectors(n), prob_vectors(n))))
def test_variational_distance_matches_subset_supremum(pair):
    w1, w2 = pair
    space = OnticSpace(tuple(f"l{i}" for i in range(len(w1))))
    got = variational_distance(PreparationMeasure(space, w1, "x"), PreparationMeasure(space, w2, "y"))
    assert got == pytest.approx(oracles.vd_subsets(w1, w2), abs=1e-12)


@given(st.integers(2, 6).flatmap(lambda n: st.tuples(prob_vectors(n), prob_vectors(n), kernels(n, 5))))
def test_data_processing_inequality(args):
    w1, w2, g = args
    src = OnticSpace(tuple(f"l{i}" for i in range(len(w1))))
    dst = OnticSpace(tuple(f"m{i}" for i in range(5)))
    k = TransformationKernel(src, dst, g, "U")
    m1, m2 = PreparationMeasure(src, w1, "x"), PreparationMeasure(src, w2, "y")
    after = variational_distance(push_preparation(k, m1), push_preparation(k, m2))
    assert after <= variational_distance(m1, m2) + 1e-12


def test_psi_ontic_detects_overlap():
    _, model = bb_qubit()
    assert is_psi_ontic(model)
    space = OnticSpace(("l1", "l2"))
    overlapping = OnticModel(
        space,
        qubit_fragment_context(HALF),
        (PreparationMeasure(space, [0.5, 0.5], "psi_1"), PreparationMeasure.dirac(space, "l1", "e1")),
    )
    assert not is_psi_ontic(overlapping)


# --------------------------------------------------------------------------
# parameter independence


def _space(n):
    return OnticSpace(tuple(f"l{i}" for i in range(n)))


def test_product_joint_response_is_parameter_independent():
    rng = np.random.default_rng(11)
    space = _space(4)
    pa, pb = stochastic(rng, 4, 2), stochastic(rng, 4, 3)
    ra = ResponseFunction(space, ("a1", "a2"), pa, "A")
    rb = ResponseFunction(space, ("b1", "b2", "b3"), pb, "B")
    outs = [(a, b) for a in ra.outcomes for b in rb.outcomes]
    joint = np.einsum("la,lb->lab", pa, pb).reshape(4, -1)
    rj = ResponseFunction(space, outs, joint, "A⊗B")
    assert parameter_independence_defect(ra, rb, rj) <= 1e-15


@pytest.mark.parametrize("delta", [1e-9, 0.01, 0.2])
def test_perturbed_joint_entry_is_detected(delta):
    space = _space(2)
    ra = ResponseFunction(space, ("a1", "a2"), [[0.5, 0.5]] * 2, "A")
    rb = ResponseFunction(space, ("b1", "b2"), [[0.5, 0.5]] * 2, "B")
    outs = [("a1", "b1"), ("a1", "b2"), ("a2", "b1"), ("a2", "b2")]
    rows = np.full((2, 4), 0.25)
    # move delta from (a2, b2) to (a1, b1): one entry raised, one lowered
    rows[1, 0] += delta
    rows[1, 3] -= delta
    rj = ResponseFunction(space, outs, rows, "A⊗B")
    assert parameter_independence_defect(ra, rb, rj) >= delta / len(outs)


def test_pr_box_is_parameter_independent():
    space = _space(1)
    uniform = [[0.5, 0.5]]
    outs = [(a, b) for a in (0, 1) for b in (0, 1)]
    for x, y in itertools.product((0, 1), repeat=2):
        row = [[0.5 if (a ^ b) == (x & y) else 0.0 for a, b in outs]]
        ra = ResponseFunction(space, (0, 1), uniform, f"A{x}")
        rb = ResponseFunction(space, (0, 1), uniform, f"B{y}")
        rj = ResponseFunction(space, outs, row, f"A{x}⊗B{y}")
        assert parameter_independence_defect(ra, rb, rj) == 0.0


def test_parameter_independence_outcome_mismatch():
    space = _space(1)
    ra = ResponseFunction(space, ("a1", "a2"), [[0.5, 0.5]], "A")
    rb = ResponseFunction(space, ("b1", "b2"), [[0.5, 0.5]], "B")
    rj = ResponseFunction(space, [("a1", "b1"), ("a3", "b2")], [[0.5, 0.5]], "J")
    with pytest.raises(ValidationError):
        parameter_independence_defect(ra, rb, rj)


# --------------------------------------------------------------------------
# ancilla independence


def product_complete_model(c, ancilla_weights=(1.0,), perturb=None):
    """Deterministic system model with an ancilla model appended slot-wise.

    Joint ontic states are pairs ``(l_i, m_k)``; ``A⊗1`` ignores the
    ancilla slot and the appender draws the second slot from
    ``ancilla_weights``.  ``perturb = (pair_index, delta)`` shifts one joint
    response row.
    """
    sys = builtin_deterministic_model(c)
    d, k = len(c), len(ancilla_weights)
    e1 = SparseState.basis((2,), (1,))
    pairs = [(i, m) for i in range(d) for m in range(k)]
    space = OnticSpace(tuple(f"l{i + 1}m{m + 1}" for i, m in pairs))
    obs = lift_observable(sys.quantum.observable("A"), 2)
    ctx = QuantumContext(
        (d, 2), {"psi_1⊗phi": tensor(sys.quantum.state("psi_1"), e1)}, {"A⊗1": obs}
    )
    rows = np.array([sys.response("A").probs[i] for i, _ in pairs])
    if perturb is not None:
        pos, delta = perturb
        rows[pos, 0] -= delta
        rows[pos, 1] += delta
    joint = OnticModel(space, ctx, (), (ResponseFunction(space, obs.labels, rows, "A⊗1"),))
    gamma = np.zeros((d, len(pairs)))
    for col, (i, m) in enumerate(pairs):
        gamma[i, col] = ancilla_weights[m]
    app = Appender((d,), (d, 2), "phi", TransformationKernel(sys.space, space, gamma, "phi"))
    return CompleteOnticModel.of(sys, joint, appenders=[app])


def test_product_construction_is_ancilla_independent():
    cm = product_complete_model(THIRDS, (0.3, 0.7))
    assert ancilla_independence_defect(cm, (2,), "A", "phi") <= 1e-15


@pytest.mark.parametrize("delta", [1e-3, 0.1])
def test_perturbed_lift_is_detected_but_bounded(delta):
    w = 0.3
    with numeric_policy(aggregate=1.0):
        cm = product_complete_model(THIRDS, (w, 1 - w), perturb=(0, delta))
    defect = ancilla_independence_defect(cm, (2,), "A", "phi")
    assert 0 < defect <= w * delta + 1e-15


def test_appender_must_prepare_products():
    with pytest.raises(ValidationError, match="product states"):
        product_complete_model(THIRDS, (0.3, 0.7), perturb=(0, 0.1))


def test_bb_complete_model_is_ancilla_independent():
    cm, _ = bb_qubit()
    cm = entangling_extension(cm, THIRDS)
    assert ancilla_independence_defect(cm, (2,), "A", "phi") <= 1e-12


def test_missing_appender():
    cm, _ = bb_qubit()
    with pytest.raises(TagError):
        ancilla_independence_defect(cm, (2,), "A", "phi")


# --------------------------------------------------------------------------
# unitary invariance


def swap_fragment_model():
    plus = SparseState((2,), {(1,): 1 / math.sqrt(2), (2,): 1 / math.sqrt(2)})
    ctx = QuantumContext(
        (2,),
        {"plus": plus, "e1": SparseState.basis((2,), (1,)), "e2": SparseState.basis((2,), (2,))},
        {"A": ProjectorObservable.local_basis((2,), 0)},
        {"X": cyclic_shift(2)},
    )
    return builtin_beltrametti_bugajski(ctx, ["plus", "e1", "e2"], unitaries=["X"]).models[(2,)]


def test_identity_kernel_has_no_invariance_defect():
    model = builtin_deterministic_model(THIRDS)
    ident = TransformationKernel.identity(model.space, "I")
    model = OnticModel(
        model.space,
        model.quantum.extended(unitaries={"I": StructuredUnitary.identity((0,), (2,))}),
        model.preparations,
        model.responses,
        (ident,),
    )
    rec = unitary_invariance_check(model, model.preparation("psi_1"), ident, model.response("A"), "a1")
    assert rec.premise_holds and rec.invariance_defect == 0.0 and rec.satisfied


def test_bb_fragment_is_unitarily_invariant():
    model = swap_fragment_model()
    kx, resp = model.kernel("X"), model.response("A")
    rec = unitary_invariance_check(model, model.preparation("plus"), kx, resp, "a1")
    assert rec.premise_holds and rec.invariance_defect <= 1e-12 and rec.satisfied
    # e1 -> e2 changes the Born weight, so the premise fails and the check is vacuous
    rec = unitary_invariance_check(model, model.preparation("e1"), kx, resp, "a1")
    assert not rec.premise_holds and rec.satisfied


def test_deterministic_model_violates_unitary_invariance():
    model = builtin_deterministic_model(HALF)
    rec = unitary_invariance_check(model, model.preparation("psi_1"), model.kernel("X"), model.response("A"), "a1")
    assert rec.premise_holds
    assert rec.invariance_defect == pytest.approx(1.0, abs=1e-12)
    assert not rec.satisfied


# --------------------------------------------------------------------------
# variance inequality


def test_permutation_kernel_gives_equality():
    rng = np.random.default_rng(5)
    p, mu = rng.random(6), stochastic(rng, 1, 6)[0]
    rec = variance_inequality_check(p, np.eye(6)[[3, 1, 5, 0, 2, 4]], mu)
    assert rec.lhs == pytest.approx(rec.rhs, abs=1e-14) and rec.holds


def test_fully_mixing_kernel_kills_variance():
    rng = np.random.default_rng(6)
    p, mu = rng.random(5), stochastic(rng, 1, 5)[0]
    g = np.tile(stochastic(rng, 1, 5), (5, 1))
    rec = variance_inequality_check(p, g, mu)
    assert abs(rec.lhs) <= 1e-15 and rec.rhs >= 0 and rec.holds


@settings(max_examples=200)
@given(st.integers(1, 8).flatmap(lambda n: st.tuples(prob_vectors(n), kernels(n, n), st.lists(st.floats(0, 1), min_size=n, max_size=n))))
def test_jensen_on_random_instances(args):
    mu, g, p = args
    assert variance_inequality_check(np.array(p), g, mu).holds


def test_variance_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        variance_inequality_check(np.ones(3), np.eye(2), np.array([0.5, 0.5]))


# --------------------------------------------------------------------------
# almost-sure reformulation


def test_reformulation_vanishes_on_bb_extension():
    cm, _ = bb_qubit()
    cm = entangling_extension(cm, THIRDS)
    rep = no_more_mud_check(cm, (2,), "psi_1", "phi", "CX", "A", "psi_S")
    assert rep.defect <= 1e-10 and rep.chain_holds
    for ln in rep.lines:
        assert ln.l0 <= ln.l1 + 1e-12 and ln.l1 <= ln.l2 + 1e-12
        assert ln.l2 == pytest.approx(ln.l3, abs=1e-12)


@pytest.mark.parametrize("c_sq,expected", [((0.5, 0.5), 0.5), ((1 / 3, 2 / 3), 4 / 9)])
def test_reformulation_positive_on_counterexample(c_sq, expected):
    c = [math.sqrt(x) for x in c_sq]
    cm = entangling_extension(CompleteOnticModel.of(builtin_deterministic_model(c)), c)
    rep = no_more_mud_check(cm, (2,), "psi_1", "phi", "CX", "A", "psi_S")
    assert rep.defect == pytest.approx(expected, abs=1e-12)
    assert rep.chain_holds


def test_identity_unitary_reduces_to_ancilla_average():
    c = THIRDS
    sys = builtin_deterministic_model(c)
    e1 = SparseState.basis((2,), (1,))
    cm = extend_with_ancilla(
        CompleteOnticModel.of(sys),
        (2,),
        e1,
        "phi",
        {"I": StructuredUnitary.identity((0, 1), (2, 2))},
        {"start": tensor(sys.quantum.state("psi_1"), e1)},
    )
    rep = no_more_mud_check(cm, (2,), "psi_1", "phi", "I", "A", "start")
    app = cm.appender((2,), "phi")
    joint = cm.models[(2, 2)]
    averaged = app.kernel.rows @ joint.response("A⊗1").probs
    mu = sys.preparation("psi_1").weights
    weighted = max(float(mu @ np.abs(sys.response("A").probs[:, a] - averaged[:, a])) for a in range(2))
    assert rep.defect == pytest.approx(weighted, abs=1e-15)
    assert rep.defect <= rep.ancilla_defect + 1e-15
    assert rep.ancilla_defect == pytest.approx(ancilla_independence_defect(cm, (2,), "A", "phi"), abs=0)


def test_reformulation_precondition():
    cm, _ = bb_qubit()
    cm = entangling_extension(cm, THIRDS)
    with pytest.raises(PreconditionError):
        no_more_mud_check(cm, (2,), "psi_1", "phi", "CX", "A", "psi_1⊗phi")


# --------------------------------------------------------------------------
# built-in models


def test_basis_fragment_has_zero_one_rows():
    ctx = qubit_fragment_context(HALF)
    model = builtin_beltrametti_bugajski(ctx, ["e1", "e2"], ["A"]).models[(2,)]
    assert model.space.labels == ("e1", "e2")
    np.testing.assert_array_equal(model.response("A").probs, np.eye(2))


def test_fragment_must_be_closed():
    rot = StructuredUnitary((0,), (2,), {}, (Rotation((1,), (2,), math.pi / 4),), "R")
    ctx = qubit_fragment_context(HALF).extended(unitaries={"R": rot})
    with pytest.raises(ValidationError, match="R∘e1 escapes"):
        builtin_beltrametti_bugajski(ctx, ["e1", "e2"], ["A"], ["R"])


def test_rotation_orbit_model():
    model = rotation_orbit_model()
    assert len(model.space) == 4
    for prep, resp in all_pairs(model):
        assert reproduce_defect(model, prep, resp) <= 1e-12
        assert reproduce_defect(model, prep, resp, model.kernel("R")) <= 1e-12
    assert is_trivial(model)
    assert is_psi_ontic(model)


@st.composite
def pure_qubit_fragments(draw):
    d = draw(st.integers(2, 3))
    n = draw(st.integers(1, 4))
    states = {}
    for t in range(n):
        vec = np.array(draw(st.lists(st.floats(-1, 1), min_size=2 * d, max_size=2 * d)))
        vec = vec[:d] + 1j * vec[d:]
        if np.linalg.norm(vec) < 1e-2:
            vec = np.eye(d)[t % d].astype(complex)
        states[f"s{t}"] = SparseState.from_dense((d,), vec / np.linalg.norm(vec))
    return d, states


@given(pure_qubit_fragments())
def test_trivial_models_are_psi_ontic(frag):
    d, states = frag
    ctx = QuantumContext((d,), states, {"A": ProjectorObservable.local_basis((d,), 0)})
    model = builtin_beltrametti_bugajski(ctx, list(states)).models[(d,)]
    assert not is_trivial(model) or is_psi_ontic(model)
    assert is_trivial(model)


# --------------------------------------------------------------------------
# fault-injection detectability


TOL = 1e-10


def test_every_defect_flags_a_tenfold_perturbation():
    delta = 20 * TOL
    _, model = bb_qubit()
    resp = model.response("A")
    rows = resp.probs.copy()
    lam = model.space.index("e1")
    rows[lam] = [1 - delta, delta]
    bad = ResponseFunction(model.space, resp.outcomes, rows, "A")
    prep = model.preparation("e1")
    assert reproduce_defect(model, prep, bad) > TOL
    assert triviality_defect(model, prep, bad) > TOL

    space = _space(2)
    ra = ResponseFunction(space, ("a1", "a2"), [[0.5, 0.5]] * 2, "A")
    rb = ResponseFunction(space, ("b1", "b2"), [[0.5, 0.5]] * 2, "B")
    jrows = np.full((2, 4), 0.25)
    jrows[0, 0] += delta
    jrows[0, 3] -= delta
    rj = ResponseFunction(space, [("a1", "b1"), ("a1", "b2"), ("a2", "b1"), ("a2", "b2")], jrows, "J")
    assert parameter_independence_defect(ra, rb, rj) > TOL

    with numeric_policy(aggregate=1.0):
        cm = product_complete_model(THIRDS, (1.0,), perturb=(0, delta))
    assert ancilla_independence_defect(cm, (2,), "A", "phi") > TOL

    a, b = PreparationMeasure(space, [0.5, 0.5], "x"), PreparationMeasure(space, [0.5 + delta, 0.5 - delta], "y")
    assert variational_distance(a, b) > TOL
