"""JSON interchange for ontic models.

A model document carries the ontic space, every preparation, response and
kernel, the joint links, and the quantum objects their tags resolve to, so a
file is self-contained.  Documents are validated against the shipped JSON
schema first; semantic problems found while building the model (rows that
are not stochastic, tags that do not resolve) are reported with a JSON
pointer to the offending field as well.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Hashable, Mapping

import jsonschema
import numpy as np

from .errors import ModelSchemaError, OnticLabError
from .ontic import (
    JointLink,
    OnticModel,
    OnticSpace,
    PreparationMeasure,
    QuantumContext,
    ResponseFunction,
    TransformationKernel,
)
from .quantum import (
    BasisBlock,
    Mixture,
    ProjectorObservable,
    Ray,
    Rotation,
    SparseState,
    StructuredUnitary,
    UnitarySequence,
)

SHIPPED_MODELS = ("beltrametti_bugajski", "deterministic_counterexample")


@dataclass(frozen=True)
class ChainSpec:
    d: int
    N: int
    i: int = 1
    j: int = 2


@dataclass(frozen=True, eq=False)
class LoadedModel:
    model: OnticModel
    chain: ChainSpec | None = None


@lru_cache(maxsize=1)
def model_schema() -> dict:
    text = resources.files("onticlab").joinpath("data/ontic_model.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def shipped_model_path(name: str) -> Path:
    if name not in SHIPPED_MODELS:
        raise KeyError(f"no shipped model {name!r}; choose from {SHIPPED_MODELS}")
    return Path(str(resources.files("onticlab").joinpath(f"data/models/{name}.json")))


def _pointer(path) -> str:
    return "".join(f"/{str(p).replace('~', '~0').replace('/', '~1')}" for p in path)


def validate_document(doc: Any) -> None:
    """Raise :class:`ModelSchemaError` for the most relevant schema violation."""
    validator = jsonschema.Draft202012Validator(model_schema())
    err = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if err is not None:
        raise ModelSchemaError(err.message, _pointer(err.absolute_path))


# ---------------------------------------------------------------------------
# decoding


def _outcome(raw) -> Hashable:
    return tuple(raw) if isinstance(raw, list) else raw


def _amplitudes(raw: list, shape: tuple[int, ...], where: str) -> SparseState:
    n = len(shape)
    amps: dict[tuple[int, ...], complex] = {}
    for pos, entry in enumerate(raw):
        if len(entry) != n + 2:
            raise ModelSchemaError(f"expected {n} indices followed by re, im", f"{where}/{pos}")
        idx = tuple(entry[:n])
        if any(not float(i).is_integer() for i in idx):
            raise ModelSchemaError("basis indices must be integers", f"{where}/{pos}")
        key = tuple(int(i) for i in idx)
        if key in amps:
            raise ModelSchemaError(f"index {key} listed twice", f"{where}/{pos}")
        amps[key] = complex(entry[n], entry[n + 1])
    return SparseState(shape, amps)


def _state(raw: Mapping, shape, where: str):
    if "amplitudes" in raw:
        return _amplitudes(raw["amplitudes"], shape, f"{where}/amplitudes")
    comps = tuple(
        (c["weight"], _amplitudes(c["amplitudes"], shape, f"{where}/mixture/{p}/amplitudes"))
        for p, c in enumerate(raw["mixture"])
    )
    return Mixture(comps)


def _unitary(tag: str, raw: Mapping, known: Mapping[str, Any], where: str):
    if "sequence" in raw:
        steps = []
        for p, t in enumerate(raw["sequence"]):
            u = known.get(t)
            if u is None:
                raise ModelSchemaError(f"unknown unitary {t!r} (define it before use)", f"{where}/sequence/{p}")
            steps.extend(u.steps if isinstance(u, UnitarySequence) else (u,))
        return UnitarySequence(tuple(steps), tag)
    perm = {tuple(a): tuple(b) for a, b in raw.get("permutation", [])}
    rots = tuple(Rotation(tuple(r["a"]), tuple(r["b"]), r["theta"]) for r in raw.get("rotations", []))
    return StructuredUnitary(tuple(raw["factors"]), tuple(raw["dims"]), perm, rots, tag)


def _observable(raw: Mapping, shape, unitaries: Mapping[str, Any], where: str) -> ProjectorObservable:
    branches = []
    for b, br in enumerate(raw["branches"]):
        elems = []
        for e, el in enumerate(br["elements"]):
            if "block" in el:
                elems.append(BasisBlock({f: i for f, i in el["block"]}))
            else:
                elems.append(Ray(_amplitudes(el["ray"], shape, f"{where}/branches/{b}/elements/{e}/ray")))
        branches.append((_outcome(br["label"]), tuple(elems)))
    frame = []
    for p, t in enumerate(raw.get("frame", [])):
        if t not in unitaries:
            raise ModelSchemaError(f"unknown unitary {t!r}", f"{where}/frame/{p}")
        frame.append(unitaries[t])
    return ProjectorObservable(shape, tuple(branches), tuple(frame), raw.get("support_rank"))


def _guard(where: str, build):
    try:
        return build()
    except ModelSchemaError:
        raise
    except (OnticLabError, ValueError, TypeError, KeyError) as exc:
        raise ModelSchemaError(str(exc), where) from exc


def _context(raw: Mapping) -> QuantumContext:
    shape = tuple(raw["shape"])
    unitaries: dict[str, Any] = {}
    for tag, u in raw.get("unitaries", {}).items():
        where = _pointer(("quantum", "unitaries", tag))
        unitaries[tag] = _guard(where, lambda: _unitary(tag, u, unitaries, where))
    states = {}
    for tag, s in raw.get("states", {}).items():
        where = _pointer(("quantum", "states", tag))
        states[tag] = _guard(where, lambda: _state(s, shape, where))
    observables = {}
    for tag, o in raw.get("observables", {}).items():
        where = _pointer(("quantum", "observables", tag))
        observables[tag] = _guard(where, lambda: _observable(o, shape, unitaries, where))
    return _guard("/quantum", lambda: QuantumContext(shape, states, observables, unitaries))


def model_from_document(doc: Any) -> LoadedModel:
    """Validate ``doc`` and build the model it describes.

    Raises:
        ModelSchemaError: with ``pointer`` set to the offending field.
    """
    validate_document(doc)
    ctx = _context(doc["quantum"])
    space = _guard("/space", lambda: OnticSpace(tuple(doc["space"])))
    preps = []
    for p, raw in enumerate(doc["preparations"]):
        where = f"/preparations/{p}"
        _guard(f"{where}/tag", lambda: ctx.state(raw["tag"]))
        preps.append(_guard(f"{where}/weights", lambda: PreparationMeasure(space, np.array(raw["weights"]), raw["tag"])))
    resps = []
    for p, raw in enumerate(doc["responses"]):
        where = f"/responses/{p}"
        _guard(f"{where}/tag", lambda: ctx.observable(raw["tag"]))
        outcomes = tuple(_outcome(o) for o in raw["outcomes"])
        rows = raw["rows"]
        if any(len(r) != len(outcomes) for r in rows):
            raise ModelSchemaError(f"every row needs {len(outcomes)} entries", f"{where}/rows")
        resps.append(_guard(f"{where}/rows", lambda: ResponseFunction(space, outcomes, np.array(rows, float), raw["tag"])))
    kernels = []
    for p, raw in enumerate(doc.get("kernels", [])):
        where = f"/kernels/{p}"
        _guard(f"{where}/tag", lambda: ctx.unitary(raw["tag"]))
        kernels.append(
            _guard(f"{where}/rows", lambda: TransformationKernel(space, space, np.array(raw["rows"], float), raw["tag"]))
        )
    tags = {r.represents for r in resps}
    links = []
    for p, raw in enumerate(doc.get("joint_links", [])):
        for key in ("localA", "localB", "joint"):
            if raw[key] not in tags:
                raise ModelSchemaError(f"no response tagged {raw[key]!r}", f"/joint_links/{p}/{key}")
        links.append(JointLink(raw["localA"], raw["localB"], raw["joint"]))
    model = _guard(
        "/", lambda: OnticModel(space, ctx, tuple(preps), tuple(resps), tuple(kernels), tuple(links), doc.get("name", ""))
    )
    chain = None
    if "chain" in doc:
        c = doc["chain"]
        chain = ChainSpec(c["d"], c["N"], c.get("i", 1), c.get("j", 2))
    return LoadedModel(model, chain)


def load_model(path: str | Path) -> LoadedModel:
    """Read, validate and build a model file.

    Raises:
        ModelSchemaError: unreadable JSON (pointer ``""``) or any violation.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelSchemaError(f"not valid JSON: {exc.msg} at line {exc.lineno}", "") from exc
    return model_from_document(doc)


# ---------------------------------------------------------------------------
# encoding


def _encode_outcome(o):
    return list(o) if isinstance(o, tuple) else o


def _encode_amplitudes(state: SparseState) -> list:
    return [[*idx, a.real, a.imag] for idx, a in sorted(state.amplitudes.items())]


def _tag_of(u, unitaries: Mapping[str, Any]) -> str:
    for tag, v in unitaries.items():
        if v is u:
            return tag
    if u.label in unitaries:
        return u.label
    raise ModelSchemaError(f"unitary {u.label!r} used in a frame or sequence is not registered", "/quantum/unitaries")


def _encode_unitary(u, unitaries) -> dict:
    if isinstance(u, UnitarySequence):
        return {"sequence": [_tag_of(s, unitaries) for s in u.steps]}
    out: dict[str, Any] = {"factors": list(u.factors), "dims": list(u.dims)}
    if u.permutation:
        out["permutation"] = [[list(a), list(b)] for a, b in sorted(u.permutation.items())]
    if u.rotations:
        out["rotations"] = [{"a": list(r.a), "b": list(r.b), "theta": r.theta} for r in u.rotations]
    return out


def _encode_observable(obs: ProjectorObservable, unitaries) -> dict:
    branches = []
    for label, elems in obs.branches:
        enc = []
        for el in elems:
            if isinstance(el, BasisBlock):
                enc.append({"block": [[f, i] for f, i in sorted(el.constraints.items())]})
            else:
                enc.append({"ray": _encode_amplitudes(el.vector)})
        branches.append({"label": _encode_outcome(label), "elements": enc})
    out: dict[str, Any] = {"branches": branches}
    if obs.frame:
        out["frame"] = [_tag_of(u, unitaries) for u in obs.frame]
    if obs.support_rank is not None:
        out["support_rank"] = obs.support_rank
    return out


def _unitary_order(unitaries: Mapping[str, Any]) -> list[str]:
    # sequences refer to earlier entries, so structured unitaries go first
    plain = [t for t, u in unitaries.items() if not isinstance(u, UnitarySequence)]
    return plain + [t for t in unitaries if t not in plain]


def model_to_document(model: OnticModel, chain: ChainSpec | None = None) -> dict:
    q = model.quantum
    states = {}
    for tag, s in q.states.items():
        if isinstance(s, Mixture):
            states[tag] = {"mixture": [{"weight": w, "amplitudes": _encode_amplitudes(c)} for w, c in s.components]}
        else:
            states[tag] = {"amplitudes": _encode_amplitudes(s)}
    doc: dict[str, Any] = {
        "name": model.name,
        "space": list(model.space.labels),
        "quantum": {
            "shape": list(q.shape),
            "states": states,
            "observables": {t: _encode_observable(o, q.unitaries) for t, o in q.observables.items()},
            "unitaries": {t: _encode_unitary(q.unitaries[t], q.unitaries) for t in _unitary_order(q.unitaries)},
        },
        "preparations": [{"tag": p.represents, "weights": p.weights.tolist()} for p in model.preparations],
        "responses": [
            {"tag": r.represents, "outcomes": [_encode_outcome(o) for o in r.outcomes], "rows": r.probs.tolist()}
            for r in model.responses
        ],
        "kernels": [{"tag": k.represents, "rows": k.rows.tolist()} for k in model.kernels],
        "joint_links": [{"localA": l.local_a, "localB": l.local_b, "joint": l.joint} for l in model.joint_links],
    }
    if chain is not None:
        doc["chain"] = {"d": chain.d, "N": chain.N, "i": chain.i, "j": chain.j}
    return doc


def dump_model(model: OnticModel, path: str | Path, chain: ChainSpec | None = None) -> None:
    doc = model_to_document(model, chain)
    validate_document(doc)
    Path(path).write_text(json.dumps(doc, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
