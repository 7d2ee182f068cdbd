"""``onticlab`` command-line interface.

Subcommands:

* ``verify``: run the desk-scale verification suite of every module.
* ``bound``: pick ``(L, eps, N)`` for a total error and report the three terms.
* ``sweep``: evaluate bound terms, fidelity and oracle residuals on a grid (CSV).
* ``model``: check a user-supplied ontic model file.

Exit codes: 0 all checks pass, 1 some check fails, 2 usage or schema
error, 3 a resource cap was hit.  Reports contain no timing information so
that runs with the same seed are byte-identical; the wall time goes to
stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import chained, embezzle, ontic
from .errors import (
    ModelSchemaError,
    OnticLabError,
    OracleMismatchError,
    ParameterIndependenceError,
    ResourceError,
    ValidationError,
)
from .modelio import load_model
from .quantum import (
    ProjectorObservable,
    Rotation,
    SparseState,
    StructuredUnitary,
    born_distribution,
    fidelity,
    get_policy,
    numeric_policy,
)

log = logging.getLogger("onticlab")

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_RESOURCE = 0, 1, 2, 3
FAULTS = ("response-row", "kernel-row", "closed-form")
SWEEP_COLUMNS_TAIL = (
    "eps", "d_eps", "N", "D", "L", "term_chain", "term_eps", "term_log", "total", "fidelity", "max_oracle_residual"
)
DEFAULT_C_SQ = "1/3,2/3"
FAULT_SIZE = 0.25
CLOSED_FORM_FAULT = 1e-6


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# reports


@dataclass
class Check:
    name: str
    value: float
    bound: float
    tolerance: float
    passed: bool

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "value": _num(self.value),
            "bound": _num(self.bound),
            "tolerance": _num(self.tolerance),
            "pass": bool(self.passed),
        }


def _num(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    return float(x)


def at_most(name: str, value: float, bound: float, tol: float) -> Check:
    return Check(name, float(value), float(bound), tol, bool(value <= bound + tol))


def strictly_below(name: str, value: float, bound: float) -> Check:
    return Check(name, float(value), float(bound), 0.0, bool(value < bound))


@dataclass
class Report:
    command: str
    config: dict
    checks: list[Check] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, check: Check) -> None:
        self.checks.append(check)

    def as_dict(self) -> dict:
        out = {"command": self.command, "config": self.config, "checks": [c.as_dict() for c in self.checks]}
        out.update(self.extra)
        out["pass"] = self.passed
        return out


def fmt(x) -> str:
    """CSV cell: integers verbatim, floats with 17 significant digits."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(x) for x in r])
    return buf.getvalue()


def checks_csv(report: Report) -> str:
    return _csv(
        ("name", "value", "bound", "tolerance", "pass"),
        [(c.name, c.value, c.bound, c.tolerance, c.passed) for c in report.checks],
    )


# ---------------------------------------------------------------------------
# argument parsing


def parse_c_sq(text: str, tol: float = 1e-9) -> tuple[float, ...]:
    """Parse ``"1/3,2/3"`` into squared weights; zeros are stripped."""
    try:
        parts = [Fraction(p.strip()) for p in text.split(",") if p.strip()]
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"cannot parse squared weights {text!r}") from None
    if not parts:
        raise UsageError("empty weight list")
    if any(p < 0 for p in parts):
        raise UsageError("squared weights must be nonnegative")
    total = sum(parts)
    if abs(float(total) - 1.0) > tol:
        raise UsageError(f"squared weights sum to {float(total)!r}, not 1")
    return tuple(float(p) for p in parts if p > 0)


def amplitudes(c_sq: Sequence[float]) -> tuple[float, ...]:
    return embezzle.amplitudes_from_squares(c_sq)


def _positive_float(text: str) -> float:
    x = float(text)
    if not (x > 0 and math.isfinite(x)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return x


def _nonneg_int(text: str) -> int:
    x = int(text)
    if x < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text!r}")
    return x


def _positive_int(text: str) -> int:
    x = int(text)
    if x < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return x


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--tol-oracle", type=_positive_float, default=None, help="closed form vs oracle tolerance")
    common.add_argument("--tol-exact", type=_positive_float, default=None, help="tolerance for direct constructions")
    common.add_argument("--out", default=None, help="write the report here instead of stdout")
    common.add_argument("--format", choices=("json", "csv"), default=None)
    common.add_argument("--jobs", type=_positive_int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="onticlab", description="Verify finite ontic models and equiprobability estimates.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", parents=[common], help="run the verification suite")
    v.add_argument("--c-sq", default=DEFAULT_C_SQ, help="squared Schmidt weights, e.g. 1/3,2/3")
    v.add_argument("--epsilon-total", type=_positive_float, default=0.5)
    v.add_argument("--eps", type=_positive_float, default=0.05)
    v.add_argument("--big-n", type=_positive_int, default=None, help="chain length and embezzling size")
    v.add_argument("--chain-l", type=_nonneg_int, default=1)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--inject-fault", choices=FAULTS, default=None)

    b = sub.add_parser("bound", parents=[common], help="final bound for a total error")
    b.add_argument("--c-sq", default=DEFAULT_C_SQ)
    b.add_argument("--epsilon-total", type=_positive_float, required=True)
    b.add_argument("--eps", type=_positive_float, default=None, help="override the recipe's eps")
    b.add_argument("--big-n", type=_positive_int, default=None, help="override the recipe's N")
    b.add_argument("--chain-l", type=_nonneg_int, default=None, help="override the recipe's L")
    b.add_argument("--digits-cap", type=_positive_int, default=embezzle.DEFAULT_DIGITS_CAP)

    s = sub.add_parser("sweep", parents=[common], help="grid of bound terms, fidelity and oracle residuals")
    s.add_argument("--c-sq", action="append", default=None, help="preset; repeat for several")
    s.add_argument("--eps", type=_positive_float, nargs="+", default=[0.05])
    s.add_argument("--big-n", type=_positive_int, nargs="+", default=[2, 4, 8, 16, 32])
    s.add_argument("--chain-l", type=_nonneg_int, nargs="+", default=[1])
    s.add_argument("--no-oracle", action="store_true", help="leave max_oracle_residual empty")

    m = sub.add_parser("model", parents=[common], help="check an ontic model file")
    m.add_argument("path")
    return p


# ---------------------------------------------------------------------------
# verify


def _random_state(rng: np.random.Generator, shape: tuple[int, ...], support: int) -> SparseState:
    dim = math.prod(shape)
    picks = rng.choice(dim, size=min(support, dim), replace=False)
    amps = {}
    for p in picks:
        idx = tuple(int(i) + 1 for i in np.unravel_index(int(p), shape))
        amps[idx] = complex(rng.normal(), rng.normal())
    norm = math.sqrt(sum(abs(a) ** 2 for a in amps.values()))
    return SparseState(shape, {k: a / norm for k, a in amps.items()})


def _random_rotation_unitary(rng: np.random.Generator, shape: tuple[int, ...]) -> StructuredUnitary:
    f = int(rng.integers(len(shape)))
    d = shape[f]
    if d < 2:
        return StructuredUnitary.identity((f,), (d,))
    a, b = (int(x) + 1 for x in rng.choice(d, size=2, replace=False))
    return StructuredUnitary((f,), (d,), {}, (Rotation((a,), (b,), float(rng.uniform(-math.pi, math.pi))),))


def _perturb_rows(rows: np.ndarray) -> np.ndarray:
    out = np.array(rows, dtype=float)
    out[0] = (1 - FAULT_SIZE) * out[0] + FAULT_SIZE * np.roll(out[0], 1)
    return out


def _with_fault(model: ontic.OnticModel, fault: str | None) -> ontic.OnticModel:
    if fault == "response-row":
        r = model.responses[0]
        bad = ontic.ResponseFunction(r.space, r.outcomes, _perturb_rows(r.probs), r.represents)
        return ontic.OnticModel(model.space, model.quantum, model.preparations, (bad, *model.responses[1:]),
                                model.kernels, model.joint_links, model.name)
    if fault == "kernel-row":
        k = model.kernels[0]
        rows = np.array(k.rows)
        rows[0] = np.roll(rows[0], 1)
        bad = ontic.TransformationKernel(k.source, k.target, rows, k.represents)
        return ontic.OnticModel(model.space, model.quantum, model.preparations, model.responses,
                                (bad, *model.kernels[1:]), model.joint_links, model.name)
    return model


def _quantum_checks(report: Report, rng: np.random.Generator) -> None:
    pol = get_policy()
    grid = [k * math.pi / 14 for k in range(8)]
    worst = 0.0
    for d in (2, 3, 4):
        for i in range(1, d + 1):
            for j in range(1, d + 1):
                if i == j:
                    continue
                for th in grid:
                    for ph in grid:
                        value = chained.cross_expectation(d, i, j, th, ph)
                        worst = max(worst, abs(value - math.sin(ph - th) ** 2 / d))
    report.add(at_most("quantum.cross-term-law", worst, 0.0, 1e-10))
    shape = (3, 2, 2)
    unit, born = 0.0, 0.0
    for _ in range(50):
        s, t = _random_state(rng, shape, 5), _random_state(rng, shape, 5)
        u = _random_rotation_unitary(rng, shape)
        unit = max(unit, abs(u.apply(s).inner(u.apply(t)) - s.inner(t)))
        obs = ProjectorObservable.local_basis(shape, int(rng.integers(3)), frame=(u,))
        born = max(born, abs(math.fsum(born_distribution(s, obs).values()) - 1.0))
    report.add(at_most("quantum.unitarity", unit, 0.0, pol.aggregate))
    report.add(at_most("quantum.born-normalization", born, 0.0, pol.aggregate))


def _ontic_checks(report: Report, rng: np.random.Generator, c: Sequence[float], fault: str | None) -> None:
    pol = get_policy()
    det = ontic.builtin_deterministic_model(c)
    prep, resp = det.preparation("psi_1"), det.response("A")
    report.add(at_most("ontic.counterexample.reproduce", ontic.reproduce_defect(det, prep, resp), 0.0, pol.exact))
    expected = max(2 * x * x * (1 - x * x) for x in c)
    tdef = ontic.triviality_defect(det, prep, resp)
    report.add(Check("ontic.counterexample.triviality", tdef, expected, pol.exact, abs(tdef - expected) <= pol.exact))

    orbit = _with_fault(ontic.rotation_orbit_model(), fault)
    worst = max(ontic.reproduce_defect(orbit, p, r) for p in orbit.preparations for r in orbit.responses)
    report.add(at_most("ontic.orbit.reproduce", worst, 0.0, pol.exact))
    worst = max(
        ontic.reproduce_defect(orbit, p, r, k) for p in orbit.preparations for r in orbit.responses for k in orbit.kernels
    )
    report.add(at_most("ontic.orbit.reproduce-transformed", worst, 0.0, pol.exact))
    worst = max(ontic.triviality_defect(orbit, p, r) for p in orbit.preparations for r in orbit.responses)
    report.add(at_most("ontic.orbit.triviality", worst, 0.0, pol.aggregate))
    dist = min(
        (ontic.variational_distance(p, q) for p in orbit.preparations for q in orbit.preparations if p is not q),
        default=1.0,
    )
    report.add(Check("ontic.orbit.psi-ontic", dist, 1.0, pol.aggregate, ontic.is_psi_ontic(orbit)))

    failures, processing = 0, 0.0
    for _ in range(200):
        n = int(rng.integers(1, 9))
        gamma = rng.dirichlet(np.ones(n), size=n)
        mu, mu2 = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        p = rng.uniform(0, 1, size=n)
        failures += not ontic.variance_inequality_check(p, gamma, mu).holds
        processing = max(processing, 0.5 * np.abs((mu - mu2) @ gamma).sum() - 0.5 * np.abs(mu - mu2).sum())
    report.add(at_most("ontic.jensen-variance", failures, 0, 0))
    report.add(at_most("ontic.data-processing", processing, 0.0, pol.exact))

    bb = ontic.entangling_extension(ontic.builtin_beltrametti_bugajski(ontic.qubit_fragment_context(c), ["psi_1", "e1", "e2"]), c)
    mud = ontic.no_more_mud_check(bb, (len(c),), "psi_1", "phi", "CX", "A", "psi_S")
    report.add(Check("ontic.reformulation.fragment", mud.defect, 0.0, pol.aggregate, mud.defect <= pol.aggregate and mud.chain_holds))
    dm = ontic.entangling_extension(ontic.CompleteOnticModel.of(det), c)
    mud = ontic.no_more_mud_check(dm, (len(c),), "psi_1", "phi", "CX", "A", "psi_S")
    report.add(Check("ontic.reformulation.counterexample-detected", mud.defect, 0.0, pol.aggregate, mud.defect > pol.aggregate))


def _chain_checks(report: Report, ns: Sequence[int]) -> None:
    for n in ns:
        rep = chained.verify_equiprobability(chained.ladder_bb_model(2, n), 2, n)
        report.add(Check(f"chained.bound[N={n}]", rep.lhs, rep.bound, get_policy().oracle, rep.passed))
    rep = chained.verify_equiprobability(chained.local_deterministic_model(2, 1), 2, 1)
    report.add(Check("chained.counterexample-detected", rep.lhs, rep.bound, get_policy().oracle, not rep.passed))


def _random_pair(rng: np.random.Generator, cfg: embezzle.EmbezzleConfig) -> tuple[int, int, int, int]:
    outs = [(i, j) for i in range(1, cfg.d + 1) for j in range(1, cfg.n[i - 1] + 1)]
    a, b = rng.choice(len(outs), size=2, replace=False)
    return (*outs[int(a)], *outs[int(b)])


def _embezzle_checks(
    report: Report, rng: np.random.Generator, c: Sequence[float], eps: float, N: int, L: int, fault: str | None
) -> None:
    pol = get_policy()
    approx = embezzle.rational_approximation(c, eps)
    window = max(abs(r - 1.0) for r in approx.ratios())
    report.add(strictly_below("embezzle.rational-window", window, eps))
    cfg = embezzle.EmbezzleConfig(approx, N)
    psi_I = embezzle.build_psi_I(cfg)
    psi_F = embezzle.build_psi_F(cfg, psi_I)
    gap = 1.0 - fidelity(psi_F, embezzle.psi_F_expansion(cfg))
    report.add(at_most("embezzle.final-state-expansion", gap, 0.0, pol.exact))
    report.add(at_most("embezzle.perfect-correlation", embezzle.perfect_correlation_check(cfg, psi_F), 0.0, 1e-12))

    worst = 0.0
    if approx.d_eps >= 2:
        offset = CLOSED_FORM_FAULT if fault == "closed-form" else 0.0
        for _ in range(20):
            i, j, i2, j2 = _random_pair(rng, cfg)
            th, ph = (float(x) for x in rng.uniform(0, math.pi / 2, size=2))
            closed = embezzle.tedious_closed_form(cfg, i, j, i2, j2, th, ph) + offset
            oracle = embezzle.tedious_oracle(cfg, i, j, i2, j2, th, ph, psi_I)
            worst = max(worst, abs(closed - oracle))
    report.add(at_most("embezzle.closed-form-oracle", worst, 0.0, pol.oracle))

    rel, holds = 0.0, True
    for i in range(1, cfg.d + 1):
        for i2 in range(1, cfg.d + 1):
            h = embezzle.harmonic_estimates(cfg, i, i2)
            rel = max(rel, abs(h.sum_k_i / h.identity_i - 1), abs(h.sum_k_i2 / h.identity_i2 - 1))
            holds = holds and h.holds
    report.add(at_most("embezzle.harmonic-identity", rel, 0.0, 1e-10))
    report.add(Check("embezzle.harmonic-lower-bounds", float(holds), 1.0, 0.0, holds))

    fids = [embezzle.embezzlement_fidelity(embezzle.EmbezzleConfig(approx, n)) for n in (2, 4, 8, 16, 32)]
    step = min(b - a for a, b in zip(fids, fids[1:]))
    if fids[0] >= 1 - pol.exact:
        # exact rationals with equal n_i: the coupling already reaches the target
        report.add(at_most("embezzle.fidelity-monotone", -step, 0.0, pol.exact))
    else:
        report.add(Check("embezzle.fidelity-monotone", step, 0.0, 0.0, step > 0))

    if approx.d_eps >= 2:
        chain = embezzle.estimate_chain(cfg, L, 1)
        report.add(Check(
            "embezzle.estimate-chain",
            chain.oracle_line,
            chain.second_bound,
            pol.oracle,
            chain.monotone and chain.max_residual <= pol.oracle,
        ))


def _bound_checks(report: Report, c: Sequence[float], total: float) -> embezzle.BoundReport:
    br = embezzle.final_bound(c, total)
    third = total / 3
    report.add(strictly_below("bound.term-chain", br.term_chain, third))
    report.add(strictly_below("bound.term-eps", br.term_eps, third))
    report.add(strictly_below("bound.term-log", br.term_log, third))
    report.add(strictly_below("bound.total", br.total, total))
    return br


def cmd_verify(args) -> Report:
    c_sq = parse_c_sq(args.c_sq)
    c = amplitudes(c_sq)
    rng = np.random.default_rng(args.seed)
    ns = (1, 5, 25) if args.big_n is None else (args.big_n,)
    N = 4 if args.big_n is None else args.big_n
    report = Report("verify", {
        "c_sq": list(c_sq), "epsilon_total": args.epsilon_total, "eps": args.eps, "big_n": N, "chain_l": args.chain_l,
        "seed": args.seed, "inject_fault": args.inject_fault,
    })
    _quantum_checks(report, rng)
    _ontic_checks(report, rng, c, args.inject_fault)
    _chain_checks(report, ns)
    _embezzle_checks(report, rng, c, args.eps, N, args.chain_l, args.inject_fault)
    _bound_checks(report, c, args.epsilon_total)
    return report


# ---------------------------------------------------------------------------
# bound


def _bound_record(br: embezzle.BoundReport) -> dict:
    return {
        "L": br.L,
        "eps": br.eps,
        "N": str(br.N),
        "N_digits": len(str(br.N)),
        "n": list(br.approx.n),
        "d_eps": br.approx.d_eps,
        "D": str(br.D),
        "term_chain": br.term_chain,
        "term_eps": br.term_eps,
        "term_log": br.term_log,
        "total": br.total,
    }


def cmd_bound(args) -> Report:
    c_sq = parse_c_sq(args.c_sq)
    c = amplitudes(c_sq)
    E = args.epsilon_total
    third = E / 3
    overridden = args.eps is not None or args.big_n is not None or args.chain_l is not None
    if overridden:
        L = embezzle.choose_L(E) if args.chain_l is None else args.chain_l
        eps = third / (4 * L + 4) if args.eps is None else args.eps
        approx = embezzle.rational_approximation(c, eps)
        N = embezzle.choose_N(approx, L, third, args.digits_cap) if args.big_n is None else args.big_n
        br = embezzle.BoundReport(*embezzle.bound_terms(approx, L, eps, N), L, eps, N, approx, E)
    else:
        br = embezzle.final_bound(c, E, args.digits_cap)
    report = Report("bound", {
        "c_sq": list(c_sq), "epsilon_total": E, "eps": args.eps, "big_n": args.big_n, "chain_l": args.chain_l,
    })
    report.add(strictly_below("bound.term-chain", br.term_chain, third))
    report.add(strictly_below("bound.term-eps", br.term_eps, third))
    report.add(strictly_below("bound.term-log", br.term_log, third))
    report.add(strictly_below("bound.total", br.total, E))
    report.extra["bound"] = _bound_record(br)
    report.extra["_row"] = _grid_row(c_sq, br.eps, br.approx, br.N, br.L, None, None)
    return report


# ---------------------------------------------------------------------------
# sweep


def sweep_header(d: int) -> list[str]:
    return ["d", *(f"c_sq_{k}" for k in range(1, d + 1)), *SWEEP_COLUMNS_TAIL]


def _grid_row(c_sq, eps, approx, N, L, fid, resid) -> list:
    chain, eps_term, log_term = embezzle.bound_terms(approx, L, eps, N)
    return [
        len(c_sq), *c_sq, eps, approx.d_eps, N, N * approx.product, L,
        chain, eps_term, log_term, chain + eps_term + log_term, fid, resid,
    ]


def sweep_point(point: tuple, oracle: bool, policy: dict) -> list:
    """Evaluate one grid point ``(c_sq, eps, N, L)``; runs in worker processes."""
    c_sq, eps, N, L = point
    with numeric_policy(**policy):
        c = amplitudes(c_sq)
        approx = embezzle.rational_approximation(c, eps)
        cfg = embezzle.EmbezzleConfig(approx, N)
        psi_I = embezzle.build_psi_I(cfg)
        psi_F = embezzle.build_psi_F(cfg, psi_I)
        fid = fidelity(psi_F, embezzle.target_state(cfg))
        resid = None
        if oracle:
            resid = 0.0
            outs = [(i, j) for i in range(1, cfg.d + 1) for j in range(1, cfg.n[i - 1] + 1)]
            for a in outs:
                for b in outs:
                    if a == b:
                        continue
                    for th, ph in embezzle.ladder_rungs(L):
                        resid = max(resid, embezzle.closed_form_oracle_check(cfg, *a, *b, th, ph, psi_I, tol=math.inf))
        return _grid_row(c_sq, eps, approx, N, L, fid, resid)


def cmd_sweep(args) -> tuple[Report, list[str], list[list]]:
    presets = args.c_sq or [DEFAULT_C_SQ, "1/4,3/4"]
    c_sqs = sorted({parse_c_sq(p) for p in presets})
    points = sorted((cs, e, n, l) for cs in c_sqs for e in args.eps for n in args.big_n for l in args.chain_l)
    policy = {k: getattr(get_policy(), k) for k in ("exact", "aggregate", "oracle")}
    if args.jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(sweep_point, points, [not args.no_oracle] * len(points), [policy] * len(points)))
    else:
        rows = [sweep_point(p, not args.no_oracle, policy) for p in points]
    d_max = max(len(cs) for cs in c_sqs)
    padded = []
    for row in rows:
        d = row[0]
        padded.append([row[0], *row[1 : 1 + d], *([None] * (d_max - d)), *row[1 + d :]])
    report = Report("sweep", {
        "c_sq": [list(cs) for cs in c_sqs], "eps": list(args.eps), "big_n": list(args.big_n), "chain_l": list(args.chain_l),
    })
    tol = get_policy().oracle
    if not args.no_oracle:
        worst = max((r[-1] for r in padded), default=0.0)
        report.add(at_most("sweep.max-oracle-residual", worst, 0.0, tol))
    return report, sweep_header(d_max), padded


# ---------------------------------------------------------------------------
# model


def cmd_model(args) -> Report:
    loaded = load_model(args.path)
    model = loaded.model
    pol = get_policy()
    report = Report("model", {"path": args.path.replace("\\", "/").rsplit("/", 1)[-1], "name": model.name})
    pairs = [(p, r) for p in model.preparations for r in model.responses]
    worst = max((ontic.reproduce_defect(model, p, r) for p, r in pairs), default=0.0)
    report.add(at_most("model.reproduce", worst, 0.0, pol.aggregate))
    if model.kernels:
        worst = max(ontic.reproduce_defect(model, p, r, k) for p, r in pairs for k in model.kernels)
        report.add(at_most("model.reproduce-transformed", worst, 0.0, pol.aggregate))
    triv = max((ontic.triviality_defect(model, p, r) for p, r in pairs), default=0.0)
    report.add(at_most("model.triviality", triv, 0.0, pol.aggregate))
    pure = [p for p in model.preparations if isinstance(model.quantum.state(p.represents), SparseState)]
    dists = [
        ontic.variational_distance(p, q)
        for a, p in enumerate(pure)
        for q in pure[a + 1 :]
        if fidelity(model.quantum.state(p.represents), model.quantum.state(q.represents)) < 1 - pol.aggregate
    ]
    psi_ontic = ontic.is_psi_ontic(model)
    report.add(Check("model.psi-ontic", min(dists, default=1.0), 1.0, pol.aggregate, psi_ontic))
    if model.joint_links:
        worst = max(
            ontic.parameter_independence_defect(model.response(l.local_a), model.response(l.local_b), model.response(l.joint))
            for l in model.joint_links
        )
        report.add(at_most("model.parameter-independence", worst, 0.0, pol.exact))
    if loaded.chain is not None:
        ch = loaded.chain
        try:
            rep = chained.verify_equiprobability(model, ch.d, ch.N, ch.i, ch.j)
            report.add(Check("model.chain", rep.lhs, rep.bound, pol.oracle, rep.passed))
            if not rep.passed:
                report.extra["chain_failed_line"] = rep.failed_line.name
        except ParameterIndependenceError as exc:
            report.add(Check(f"model.chain[{exc.rung}]", exc.defect, 0.0, pol.exact, False))
    report.extra["is_trivial"] = bool(triv <= pol.aggregate)
    report.extra["is_psi_ontic"] = bool(psi_ontic)
    return report


# ---------------------------------------------------------------------------
# main


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _render(args, report: Report, table: tuple[list[str], list[list]] | None = None) -> str:
    fmt_ = args.format or ("csv" if args.command == "sweep" else "json")
    if fmt_ == "csv":
        if table is not None:
            return _csv(*table)
        if args.command == "bound":
            return _csv(sweep_header(report.extra["_row"][0])[:-2], [report.extra["_row"][:-2]])
        return checks_csv(report)
    body = report.as_dict()
    body.pop("_row", None)
    if table is not None:
        body["columns"] = table[0]
        body["rows"] = [[None if x is None else _num(x) for x in r] for r in table[1]]
    return json.dumps(body, indent=2, ensure_ascii=False) + "\n"


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_PASS
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    policy = {}
    if args.tol_oracle is not None:
        policy["oracle"] = args.tol_oracle
    if args.tol_exact is not None:
        policy["exact"] = args.tol_exact
    start = time.perf_counter()
    commands: dict[str, Callable] = {"verify": cmd_verify, "bound": cmd_bound, "sweep": cmd_sweep, "model": cmd_model}
    try:
        with numeric_policy(**policy):
            result = commands[args.command](args)
    except ModelSchemaError as exc:
        print(f"onticlab: schema error at {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ResourceError as exc:
        print(f"onticlab: resource cap exceeded (required {exc.required}): {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except (UsageError, ValidationError) as exc:
        print(f"onticlab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OracleMismatchError as exc:
        print(f"onticlab: oracle mismatch: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, OnticLabError) as exc:
        print(f"onticlab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    table = None
    if isinstance(result, tuple):
        result, *table = result
    _emit(_render(args, result, tuple(table) if table else None), args.out)
    for check in result.checks:
        if not check.passed:
            print(f"FAIL {check.name}: value {check.value!r}, bound {check.bound!r}", file=sys.stderr)
    print(f"wall-time {time.perf_counter() - start:.3f} s", file=sys.stderr)
    return EXIT_PASS if result.passed else EXIT_FAIL


def main_exit() -> None:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
