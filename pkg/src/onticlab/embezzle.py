"""Embezzlement coupling and the extended equiprobability estimate.

The Born weights ``c_i^2`` are approximated by ``n_i / d_eps``.  The pair is
coupled to an ``m``-level pair (``m = max n_i``) and to a ``D``-level pair in
the embezzling state ``C_N sum_k k^{-1/2} g_k (x) g_k`` with
``D = N prod n_i``.  Six-factor basis vectors are indexed
``(k, k~, j, j~, i, i~)``: the ``D``-level pair, the ``m``-level pair and the
original pair, each ordered (first party, second party).

Local permutations ``U`` (factors 0, 2, 4) and ``V`` (factors 1, 3, 5) turn
the initial state into one close to ``psi_D (x) psi_{d_eps}``.  Two-level
rotations ``U_theta`` (factors 2, 4) and ``V_phi`` (factors 3, 5) drive a
second chained estimate whose cross terms have a closed form; every closed
form here is compared against a Born-rule evaluation of the sparse state.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import mpmath

from .errors import OracleMismatchError, ResourceError, ValidationError
from .quantum import (
    BasisBlock,
    ProjectorObservable,
    Rotation,
    SparseState,
    StructuredUnitary,
    born_distribution,
    fidelity,
    get_policy,
)

DEFAULT_SUPPORT_CAP = 10**7
DEFAULT_D_EPS_CAP = 10**6
DEFAULT_DIGITS_CAP = 10**5
#: relative slack below E/3 demanded of the log term, so that the strict
#: inequality still holds after the term is rounded to double precision
LOG_MARGIN = 1e-12

#: position of (A^N, B^N, A^eps, B^eps, A, B) inside the six-factor layout
TARGET_FACTOR_ORDER = (0, 1, 2, 3, 4, 5)


def support_cap() -> int:
    raw = os.environ.get("ONTICLAB_CAP_SUPPORT")
    if raw is None:
        return DEFAULT_SUPPORT_CAP
    try:
        cap = int(raw)
    except ValueError:
        raise ValidationError(f"ONTICLAB_CAP_SUPPORT must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ValidationError("ONTICLAB_CAP_SUPPORT must be positive")
    return cap


def _require_support(size: int, what: str) -> None:
    cap = support_cap()
    if size > cap:
        raise ResourceError(f"{what} needs {size} nonzero amplitudes, above the cap {cap}", required=size)


def _amplitudes(c: Sequence[float]) -> tuple[float, ...]:
    c = tuple(float(x) for x in c)
    if not c or any(x <= 0 for x in c):
        raise ValidationError("Schmidt weights must be strictly positive (strip zeros first)")
    defect = math.fsum(x * x for x in c) - 1.0
    if abs(defect) > get_policy().exact:
        raise ValidationError(f"Schmidt weights not normalized: sum of squares deviates from 1 by {defect:.3e}")
    return c


def amplitudes_from_squares(c_sq: Sequence[float], tol: float = 1e-9) -> tuple[float, ...]:
    """Positive square roots of squared weights, renormalized after a ``tol`` check."""
    c_sq = [float(x) for x in c_sq]
    if not c_sq or any(x <= 0 for x in c_sq):
        raise ValidationError("squared weights must be strictly positive")
    total = math.fsum(c_sq)
    if abs(total - 1.0) > tol:
        raise ValidationError(f"squared weights sum to {total!r}, not 1")
    return tuple(math.sqrt(x / total) for x in c_sq)


# ---------------------------------------------------------------------------
# rational approximation


@dataclass(frozen=True)
class RationalApprox:
    c: tuple[float, ...]
    eps: float
    n: tuple[int, ...]

    @property
    def d(self) -> int:
        return len(self.c)

    @property
    def d_eps(self) -> int:
        return sum(self.n)

    @property
    def m_eps(self) -> int:
        return max(self.n)

    @property
    def product(self) -> int:
        return math.prod(self.n)

    def ratios(self) -> tuple[float, ...]:
        return tuple(ci * ci * self.d_eps / ni for ci, ni in zip(self.c, self.n))


def _largest_remainder(weights: Sequence[float], total: int) -> list[int]:
    raw = [w * total for w in weights]
    n = [math.floor(x) for x in raw]
    short = total - sum(n)
    order = sorted(range(len(raw)), key=lambda p: (-(raw[p] - n[p]), p))
    for p in order[:short]:
        n[p] += 1
    return n


def rational_approximation(c: Sequence[float], eps: float, cap: int = DEFAULT_D_EPS_CAP) -> RationalApprox:
    """Smallest ``d_eps`` whose largest-remainder rounding lands every ratio in the window.

    The window ``c_i^2 d_eps / n_i in (1 - eps, 1 + eps)`` is treated as open,
    with a ``1e-12`` guard so that ratios on the boundary up to rounding are
    rejected.

    Raises:
        ValidationError: ``eps <= 0`` or invalid weights.
        ResourceError: no solution with ``d_eps <= cap``.
    """
    c = _amplitudes(c)
    if not eps > 0:
        raise ValidationError("eps must be positive")
    sq = [x * x for x in c]
    guard = 1e-12
    for d_eps in range(len(c), cap + 1):
        n = _largest_remainder(sq, d_eps)
        if min(n) < 1:
            continue
        if all(abs(s * d_eps / ni - 1.0) < eps - guard for s, ni in zip(sq, n)):
            return RationalApprox(c, float(eps), tuple(n))
    raise ResourceError(f"no rational approximation with d_eps <= {cap}", required=cap)


# ---------------------------------------------------------------------------
# configuration and index maps


def harmonic(n: int) -> float:
    """``sum_{k=1}^n 1/k`` with compensated summation."""
    return math.fsum(1.0 / k for k in range(1, n + 1))


@dataclass(frozen=True)
class IndexMap:
    """``j_{i,k} = k - n_i (ceil(k/n_i) - 1)`` and its inverse ``k_{m,i,j} = j + (m-1) n_i``."""

    n: tuple[int, ...]

    def block(self, i: int, k: int) -> int:
        """``ceil(k / n_i)``."""
        return -(-k // self.n[i - 1])

    def j(self, i: int, k: int) -> int:
        ni = self.n[i - 1]
        return k - ni * (-(-k // ni) - 1)

    def k(self, m: int, i: int, j: int) -> int:
        return j + (m - 1) * self.n[i - 1]


@dataclass(frozen=True)
class EmbezzleConfig:
    approx: RationalApprox
    N: int

    def __post_init__(self) -> None:
        if self.N < 1:
            raise ValidationError("N must be at least 1")

    @property
    def D(self) -> int:
        return self.N * self.approx.product

    @property
    def d(self) -> int:
        return self.approx.d

    @property
    def m(self) -> int:
        return self.approx.m_eps

    @property
    def n(self) -> tuple[int, ...]:
        return self.approx.n

    @property
    def c(self) -> tuple[float, ...]:
        return self.approx.c

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.D, self.D, self.m, self.m, self.d, self.d)

    @cached_property
    def harmonic_sum(self) -> float:
        return harmonic(self.D)

    @property
    def C_N(self) -> float:
        return 1.0 / math.sqrt(self.harmonic_sum)

    @property
    def C_N_sq(self) -> float:
        return 1.0 / self.harmonic_sum

    @property
    def index(self) -> IndexMap:
        return IndexMap(self.n)


def make_config(c: Sequence[float], eps: float, N: int) -> EmbezzleConfig:
    return EmbezzleConfig(rational_approximation(c, eps), N)


# ---------------------------------------------------------------------------
# states and unitaries


def build_psi_I(cfg: EmbezzleConfig) -> SparseState:
    """``C_N sum_{k,i} c_i / sqrt(k) |k, k, 1, 1, i, i>``."""
    _require_support(cfg.D * cfg.d, "the initial state")
    cn = cfg.C_N
    amps = {
        (k, k, 1, 1, i, i): cn * ci / math.sqrt(k) for k in range(1, cfg.D + 1) for i, ci in enumerate(cfg.c, start=1)
    }
    return SparseState(cfg.shape, amps)


def _embezzle_map(cfg: EmbezzleConfig) -> dict[tuple[int, int, int], tuple[int, int, int]]:
    idx = cfg.index
    return {(k, 1, i): (idx.block(i, k), idx.j(i, k), i) for k in range(1, cfg.D + 1) for i in range(1, cfg.d + 1)}


def build_embezzle_unitaries(cfg: EmbezzleConfig) -> tuple[StructuredUnitary, StructuredUnitary]:
    """Permutations ``U`` on factors (0, 2, 4) and ``V`` on factors (1, 3, 5).

    Both send ``(k, 1, i)`` on their factors to ``(ceil(k/n_i), j_{i,k}, i)``
    and are completed to permutations of the local basis.
    """
    _require_support(cfg.D * cfg.d, "the embezzling unitaries")
    mapping = _embezzle_map(cfg)
    dims = (cfg.D, cfg.m, cfg.d)
    u = StructuredUnitary.from_partial_map((0, 2, 4), dims, mapping, "U")
    return u, StructuredUnitary((1, 3, 5), dims, u.permutation, (), "V")


def build_psi_F(cfg: EmbezzleConfig, psi_I: SparseState | None = None) -> SparseState:
    """``U V Psi_I``."""
    u, v = build_embezzle_unitaries(cfg)
    psi_I = build_psi_I(cfg) if psi_I is None else psi_I
    return u.apply(v.apply(psi_I))


def psi_F_expansion(cfg: EmbezzleConfig) -> SparseState:
    """The expanded form ``C_N sum c_i/sqrt(k) |b, b, j, j, i, i>`` with ``b = ceil(k/n_i)``."""
    _require_support(cfg.D * cfg.d, "the final state")
    idx, cn = cfg.index, cfg.C_N
    amps: dict[tuple[int, ...], float] = {}
    for k in range(1, cfg.D + 1):
        for i, ci in enumerate(cfg.c, start=1):
            b, j = idx.block(i, k), idx.j(i, k)
            amps[(b, b, j, j, i, i)] = cn * ci / math.sqrt(k)
    return SparseState(cfg.shape, amps)


def target_state(cfg: EmbezzleConfig) -> SparseState:
    """``psi_D (x) psi_{d_eps}`` laid out on the six factors."""
    _require_support(cfg.D * cfg.approx.d_eps, "the target state")
    cn, de = cfg.C_N, cfg.approx.d_eps
    amps = {}
    for k in range(1, cfg.D + 1):
        for i, ni in enumerate(cfg.n, start=1):
            for j in range(1, ni + 1):
                amps[(k, k, j, j, i, i)] = cn / math.sqrt(k) / math.sqrt(de)
    return SparseState(cfg.shape, amps).permute_factors(TARGET_FACTOR_ORDER)


def embezzlement_fidelity(cfg: EmbezzleConfig, psi_F: SparseState | None = None) -> float:
    psi_F = build_psi_F(cfg) if psi_F is None else psi_F
    return fidelity(psi_F, target_state(cfg))


def theta_unitaries(
    cfg: EmbezzleConfig, i: int, j: int, i2: int, j2: int, theta: float, phi: float | None = None
) -> tuple[StructuredUnitary, StructuredUnitary]:
    """``U_theta`` on factors (2, 4) and ``V_phi`` on factors (3, 5).

    Both rotate the local pair ``(j, i)`` towards ``(j2, i2)``; ``phi``
    defaults to ``theta``.
    """
    _check_pair(cfg, i, j, i2, j2)
    phi = theta if phi is None else phi
    dims = (cfg.m, cfg.d)
    u = StructuredUnitary((2, 4), dims, {}, (Rotation((j, i), (j2, i2), theta),), "U_theta")
    v = StructuredUnitary((3, 5), dims, {}, (Rotation((j, i), (j2, i2), phi),), "V_phi")
    return u, v


def _check_pair(cfg: EmbezzleConfig, i: int, j: int, i2: int, j2: int) -> None:
    for ii, jj in ((i, j), (i2, j2)):
        if not 1 <= ii <= cfg.d:
            raise ValidationError(f"outcome index {ii} outside 1..{cfg.d}")
        if not 1 <= jj <= cfg.n[ii - 1]:
            raise ValidationError(f"sub-index {jj} outside 1..{cfg.n[ii - 1]} for outcome {ii}")
    if (i, j) == (i2, j2):
        raise ValidationError("the two rotated outcomes must differ")


def _outcomes(cfg: EmbezzleConfig) -> list[tuple[int, int]]:
    return [(i, j) for i in range(1, cfg.d + 1) for j in range(1, cfg.n[i - 1] + 1)]


def a_label(i: int, j: int) -> str:
    return f"a{i},{j}"


def b_label(i: int, j: int) -> str:
    return f"b{i},{j}"


def rotated_observables(
    cfg: EmbezzleConfig, i: int, j: int, i2: int, j2: int, theta: float, phi: float
) -> tuple[ProjectorObservable, ProjectorObservable, ProjectorObservable]:
    """``(A_theta, B_phi, joint)`` measured on the initial state.

    ``A_theta`` has projectors ``U* U_theta* P^A_{i,j} U_theta U``; the joint
    observable multiplies each ``A_theta`` projector with each ``B_phi`` one.
    Their support is the span reached by the ``n_i`` sub-indices.
    """
    u, v = build_embezzle_unitaries(cfg)
    ut, vp = theta_unitaries(cfg, i, j, i2, j2, theta, phi)
    outs = _outcomes(cfg)
    free = cfg.D * cfg.D * cfg.m * cfg.d
    a = ProjectorObservable(
        cfg.shape, tuple((a_label(p, q), (BasisBlock({2: q, 4: p}),)) for p, q in outs), (u, ut), len(outs) * free
    )
    b = ProjectorObservable(
        cfg.shape, tuple((b_label(p, q), (BasisBlock({3: q, 5: p}),)) for p, q in outs), (v, vp), len(outs) * free
    )
    joint = ProjectorObservable(
        cfg.shape,
        tuple(
            ((a_label(p, q), b_label(r, s)), (BasisBlock({2: q, 4: p, 3: s, 5: r}),)) for p, q in outs for r, s in outs
        ),
        (u, v, ut, vp),
        len(outs) ** 2 * cfg.D * cfg.D,
    )
    return a, b, joint


# ---------------------------------------------------------------------------
# closed forms and oracles


def _trig(theta: float, phi: float) -> tuple[float, float]:
    s = math.sin(2 * theta) * math.sin(2 * phi)
    return 2 * math.sin(theta - phi) ** 2 + s, s


def tedious_closed_form(cfg: EmbezzleConfig, i: int, j: int, i2: int, j2: int, theta: float, phi: float) -> float:
    """Closed form of the rung cost ``sum_{(r,s) != (i,j)} P(a_ij, b_rs) + P(a_rs, b_ij)``.

    The squared terms run over ``m <= D/n_i`` and ``m <= D/n_{i2}``; the
    interference term only over ``m <= min(D/n_i, D/n_{i2})``, where both
    ``k_{m,i,j}`` and ``k_{m,i2,j2}`` are at most ``D``.
    """
    _check_pair(cfg, i, j, i2, j2)
    t, s = _trig(theta, phi)
    idx, c = cfg.index, cfg.c
    ci, ci2 = c[i - 1], c[i2 - 1]
    m1, m2 = cfg.D // cfg.n[i - 1], cfg.D // cfg.n[i2 - 1]
    sq1 = math.fsum(1.0 / idx.k(m, i, j) for m in range(1, m1 + 1))
    sq2 = math.fsum(1.0 / idx.k(m, i2, j2) for m in range(1, m2 + 1))
    cross = math.fsum(1.0 / math.sqrt(idx.k(m, i, j) * idx.k(m, i2, j2)) for m in range(1, min(m1, m2) + 1))
    cn2 = cfg.C_N_sq
    return cn2 / 2 * (ci * ci * t * sq1 + ci2 * ci2 * t * sq2) - cn2 * ci * ci2 * s * cross


def tedious_closed_form_printed(
    cfg: EmbezzleConfig, i: int, j: int, i2: int, j2: int, theta: float, phi: float
) -> float:
    """The four-sum expression with each interference sum running over its own ``m`` range.

    Agrees with :func:`tedious_closed_form` when ``n_i = n_{i2}``; otherwise
    its interference sums include ``k`` beyond ``D`` and it undershoots the
    Born-rule value.
    """
    _check_pair(cfg, i, j, i2, j2)
    t, s = _trig(theta, phi)
    idx, c = cfg.index, cfg.c
    ci, ci2 = c[i - 1], c[i2 - 1]
    cn2 = cfg.C_N_sq
    first = math.fsum(
        ci * ci * t / idx.k(m, i, j) - ci * ci2 * s / math.sqrt(idx.k(m, i, j) * idx.k(m, i2, j2))
        for m in range(1, cfg.D // cfg.n[i - 1] + 1)
    )
    second = math.fsum(
        ci2 * ci2 * t / idx.k(m, i2, j2) - ci * ci2 * s / math.sqrt(idx.k(m, i, j) * idx.k(m, i2, j2))
        for m in range(1, cfg.D // cfg.n[i2 - 1] + 1)
    )
    return cn2 / 2 * (first + second)


class _Cache:
    """Per-config cache of the final state (construction dominates the oracle cost)."""

    def __init__(self) -> None:
        self.key: EmbezzleConfig | None = None
        self.psi_F: SparseState | None = None

    def get(self, cfg: EmbezzleConfig) -> SparseState:
        if self.key != cfg or self.psi_F is None:
            self.psi_F = build_psi_F(cfg)
            self.key = cfg
        return self.psi_F


_CACHE = _Cache()


def joint_distribution(
    cfg: EmbezzleConfig, i: int, j: int, i2: int, j2: int, theta: float, phi: float, psi_I: SparseState | None = None
) -> dict:
    """Born distribution of the joint ``(A_theta, B_phi)`` measurement on ``Psi_I``."""
    _, _, joint = rotated_observables(cfg, i, j, i2, j2, theta, phi)
    return born_distribution(build_psi_I(cfg) if psi_I is None else psi_I, joint)


def tedious_oracle(
    cfg: EmbezzleConfig, i: int, j: int, i2: int, j2: int, theta: float, phi: float, psi_I: SparseState | None = None
) -> float:
    """Brute-force value of the rung cost from the joint Born distribution."""
    dist = joint_distribution(cfg, i, j, i2, j2, theta, phi, psi_I)
    a, b = a_label(i, j), b_label(i, j)
    return math.fsum(p for (x, y), p in dist.items() if (x == a) != (y == b))


def closed_form_oracle_check(
    cfg: EmbezzleConfig,
    i: int,
    j: int,
    i2: int,
    j2: int,
    theta: float,
    phi: float,
    psi_I: SparseState | None = None,
    tol: float | None = None,
) -> float:
    """``|closed form - oracle|`` for one rung.

    Raises:
        OracleMismatchError: the residual exceeds ``tol`` (policy ``oracle``).
    """
    tol = get_policy().oracle if tol is None else tol
    closed = tedious_closed_form(cfg, i, j, i2, j2, theta, phi)
    oracle = tedious_oracle(cfg, i, j, i2, j2, theta, phi, psi_I)
    residual = abs(closed - oracle)
    if residual > tol:
        raise OracleMismatchError(
            f"rung ({i},{j})~({i2},{j2}) at ({theta!r}, {phi!r}): closed form {closed!r} vs oracle {oracle!r}",
            closed,
            oracle,
        )
    return residual


def zero_term_oracle(cfg: EmbezzleConfig, i: int, j: int, i2: int, j2: int, psi_I: SparseState | None = None) -> float:
    """Rung cost between ``A_{pi/2}`` at ``(i, j)`` and the unrotated ``B`` at ``(i2, j2)``.

    Zero in exact arithmetic; in floating point only ``cos(pi/2)^2 ~ 4e-33``
    survives.
    """
    dist = joint_distribution(cfg, i, j, i2, j2, math.pi / 2, 0.0, psi_I)
    a, b = a_label(i, j), b_label(i2, j2)
    return math.fsum(p for (x, y), p in dist.items() if (x == a) != (y == b))


def coupling_zero_oracle(cfg: EmbezzleConfig, i: int, psi_I: SparseState | None = None) -> float:
    """Weight of ``V Psi_I`` on ``[e_i (x) e_i2]`` and ``[e_i2 (x) e_i]`` for ``i2 != i``; exactly 0 (disjoint supports)."""
    _, v = build_embezzle_unitaries(cfg)
    state = v.apply(build_psi_I(cfg) if psi_I is None else psi_I)
    return math.fsum(
        abs(a) ** 2 for idx, a in state.amplitudes.items() if (idx[4] == i) != (idx[5] == i)
    )


def perfect_correlation_check(cfg: EmbezzleConfig, psi_F: SparseState | None = None) -> float:
    """Largest ``<Psi_F| P^A_{i,j} P^B_{r,s} |Psi_F>`` over ``(i,j) != (r,s)``."""
    psi_F = _CACHE.get(cfg) if psi_F is None else psi_F
    dist = pair_distribution(cfg, psi_F)
    return max((p for (x, y), p in dist.items() if x[1:] != y[1:]), default=0.0)


def pair_distribution(cfg: EmbezzleConfig, psi_F: SparseState) -> dict:
    """Born distribution of the unrotated ``P^A P^B`` pairs on ``Psi_F``."""
    outs = _outcomes(cfg)
    joint = ProjectorObservable(
        cfg.shape,
        tuple(
            ((a_label(p, q), b_label(r, s)), (BasisBlock({2: q, 4: p, 3: s, 5: r}),)) for p, q in outs for r, s in outs
        ),
        (),
        len(outs) ** 2 * cfg.D * cfg.D,
    )
    return born_distribution(psi_F, joint)


def pair_probability_closed_form(cfg: EmbezzleConfig, i: int, j: int) -> float:
    """``<Psi_F| P^A_{i,j} P^B_{i,j} |Psi_F> = C_N^2 c_i^2 sum_m 1/k_{m,i,j}``."""
    idx = cfg.index
    return cfg.C_N_sq * cfg.c[i - 1] ** 2 * math.fsum(1.0 / idx.k(m, i, j) for m in range(1, cfg.D // cfg.n[i - 1] + 1))


# ---------------------------------------------------------------------------
# harmonic estimates


class HarmonicEstimates(NamedTuple):
    """Exact double/triple sums next to the identities and lower bounds they satisfy."""

    sum_k_i: float
    identity_i: float
    sum_k_i2: float
    identity_i2: float
    cross_i: float
    bound_i: float
    cross_i2: float
    bound_i2: float
    cross_common: float
    bound_common: float

    @property
    def holds(self) -> bool:
        # with n_i = n_i2 = 1 a bound coincides with its sum, so allow rounding
        tol = get_policy().exact * max(1.0, self.identity_i, self.identity_i2)
        return (
            self.cross_i >= self.bound_i - tol
            and self.cross_i2 >= self.bound_i2 - tol
            and self.cross_common >= self.bound_common - tol
        )


def harmonic_estimates(cfg: EmbezzleConfig, i: int, i2: int) -> HarmonicEstimates:
    """Sums over ``j <= n_i``, ``j2 <= n_i2`` and ``m`` entering the final estimate.

    ``cross_common`` restricts ``m`` to the range where both indices stay
    within ``D``; its bound uses ``log(max(n_i, n_i2))``.
    """
    idx = cfg.index
    ni, ni2 = cfg.n[i - 1], cfg.n[i2 - 1]
    m1, m2 = cfg.D // ni, cfg.D // ni2
    inv = 1.0 / cfg.C_N_sq
    jj = [(j, j2) for j in range(1, ni + 1) for j2 in range(1, ni2 + 1)]
    s1 = math.fsum(1.0 / idx.k(m, i, j) for j, _ in jj for m in range(1, m1 + 1))
    s2 = math.fsum(1.0 / idx.k(m, i2, j2) for _, j2 in jj for m in range(1, m2 + 1))

    def cross(limit: int) -> float:
        return math.fsum(
            1.0 / math.sqrt(idx.k(m, i, j) * idx.k(m, i2, j2)) for j, j2 in jj for m in range(1, limit + 1)
        )

    root = math.sqrt(ni * ni2)
    return HarmonicEstimates(
        s1,
        ni2 * inv,
        s2,
        ni * inv,
        cross(m1),
        root * (inv - math.log(ni)),
        cross(m2),
        root * (inv - math.log(ni2)),
        cross(min(m1, m2)),
        root * (inv - math.log(max(ni, ni2))),
    )


# ---------------------------------------------------------------------------
# final bound


@dataclass(frozen=True)
class BoundReport:
    term_chain: float
    term_eps: float
    term_log: float
    L: int
    eps: float
    N: int
    approx: RationalApprox
    epsilon_total: float | None = None

    @property
    def total(self) -> float:
        return self.term_chain + self.term_eps + self.term_log

    @property
    def D(self) -> int:
        return self.N * self.approx.product


def bound_terms(approx: RationalApprox, L: int, eps: float, N: int) -> tuple[float, float, float]:
    """The three terms of the final estimate for explicit parameters."""
    steps = 2 * L + 1
    chain = math.pi**2 / (2 * steps)
    eps_term = (4 * L + 3) * eps
    if approx.d_eps == 1:
        return chain, eps_term, 0.0
    log_term = float(steps * mpmath.log(approx.d_eps) / mpmath.log(1 + mpmath.mpf(N) * approx.product))
    return chain, eps_term, log_term


def choose_L(epsilon_total: float) -> int:
    """Smallest ``L >= 0`` with ``pi^2 / (2 (2L+1)) < E/3``."""
    third = epsilon_total / 3
    x = math.pi**2 / (2 * third)
    L = max(0, math.floor((x - 1) / 2))
    while math.pi**2 / (2 * (2 * L + 1)) >= third:
        L += 1
    while L > 0 and math.pi**2 / (2 * (2 * L - 1)) < third:
        L -= 1
    return L


def choose_N(approx: RationalApprox, L: int, third: float, digits_cap: int = DEFAULT_DIGITS_CAP) -> int:
    """Smallest ``N`` with ``(2L+1) log d_eps / log(1 + N prod n) < third (1 - LOG_MARGIN)``.

    The comparison is made in multiprecision arithmetic; the margin keeps
    the double-precision value of the term strictly below ``third``.

    Raises:
        ResourceError: ``N`` would have more than ``digits_cap`` decimal
            digits; ``required`` carries the estimated digit count.
    """
    if approx.d_eps == 1:
        return 1
    target = (2 * L + 1) * math.log(approx.d_eps) / third
    digits = target / math.log(10)
    if digits > digits_cap:
        raise ResourceError(
            f"N needs about {digits:.0f} decimal digits, above the cap of {digits_cap}", required=math.ceil(digits)
        )
    with mpmath.workdps(int(digits) + 30):
        limit = mpmath.mpf(third) * (1 - mpmath.mpf(LOG_MARGIN))
        numer = (2 * L + 1) * mpmath.log(approx.d_eps)
        N = max(int(mpmath.floor((mpmath.exp(numer / limit) - 1) / approx.product)) + 1, 1)

        def ok(n: int) -> bool:
            return numer / mpmath.log(1 + mpmath.mpf(n) * approx.product) < limit

        while not ok(N):
            N += 1
        while N > 1 and ok(N - 1):
            N -= 1
    return N


def final_bound(c: Sequence[float], epsilon_total: float, digits_cap: int = DEFAULT_DIGITS_CAP) -> BoundReport:
    """Pick ``(L, eps, N)`` so that each term of the final estimate is below ``E/3``.

    ``eps`` is fixed to ``(E/3) / (4L + 4)``.
    """
    if not epsilon_total > 0:
        raise ValidationError("the total error must be positive")
    c = _amplitudes(c)
    third = epsilon_total / 3
    L = choose_L(epsilon_total)
    eps = third / (4 * L + 4)
    approx = rational_approximation(c, eps)
    N = choose_N(approx, L, third, digits_cap)
    chain, eps_term, log_term = bound_terms(approx, L, eps, N)
    return BoundReport(chain, eps_term, log_term, L, eps, N, approx, float(epsilon_total))


class EstimateChain(NamedTuple):
    """Quantum-side values of the three lines of the final estimate for outcome ``i``."""

    oracle_line: float
    first_bound: float
    second_bound: float
    max_residual: float

    @property
    def monotone(self) -> bool:
        return self.oracle_line <= self.first_bound and self.first_bound <= self.second_bound


def ladder_rungs(L: int) -> list[tuple[float, float]]:
    """``(theta, phi)`` for each cross term: A at ``(2l+1)u``, B at ``2l u``, ``u = pi/(2(2L+1))``."""
    u = math.pi / (2 * (2 * L + 1))
    out = []
    for l in range(L + 1):
        out.append(((2 * l + 1) * u, 2 * l * u))
        if l < L:
            out.append(((2 * l + 1) * u, (2 * l + 2) * u))
    return out


def estimate_chain(cfg: EmbezzleConfig, L: int, i: int, check_oracle: bool = True) -> EstimateChain:
    """Evaluate the final estimate for outcome ``i`` three ways.

    The first value sums Born-rule rung costs over the whole chain (each
    compared with its closed form when ``check_oracle``); the other two are
    the successive upper bounds in ``eps``, ``L`` and ``C_N``.
    """
    ap = cfg.approx
    de = ap.d_eps
    rungs = ladder_rungs(L)
    psi_I = build_psi_I(cfg)
    worst = 0.0
    total = []
    for j in range(1, cfg.n[i - 1] + 1):
        for i2, j2 in _outcomes(cfg):
            if (i2, j2) == (i, j):
                continue
            for theta, phi in rungs:
                closed = tedious_closed_form(cfg, i, j, i2, j2, theta, phi)
                if check_oracle:
                    oracle = tedious_oracle(cfg, i, j, i2, j2, theta, phi, psi_I)
                    worst = max(worst, abs(closed - oracle))
                total.append(closed)
            if check_oracle:
                worst = max(worst, zero_term_oracle(cfg, i, j, i2, j2, psi_I))
    line1 = abs(cfg.n[i - 1] / de - ap.c[i - 1] ** 2) + math.fsum(total) / de
    steps = 2 * L + 1
    line2 = ap.eps + math.fsum(
        steps * n2 * (2 * math.sin(math.pi / (2 * steps)) ** 2 + 2 * ap.eps + cfg.C_N_sq * math.log(de)) for n2 in cfg.n
    ) / de
    line3 = sum(bound_terms(ap, L, ap.eps, cfg.N))
    return EstimateChain(line1, line2, line3, worst)
