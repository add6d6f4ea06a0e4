"""Case, scenario and parameter file formats.

Native cases are JSON (schema ``oldf-case`` v1).  Loads are stored as positive
consumption in MW/MVAr and converted on ingestion into per-unit *net injections*
(``p = -P_load / base_mva``).  A small MATPOWER subset (baseMVA, bus, branch) is
also accepted for single-phase cases.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .network import (
    Branch,
    Branch3,
    NetworkError,
    RadialNetwork,
    ThreePhaseNetwork,
    orient,
)

log = logging.getLogger(__name__)

CASE_FORMAT = "oldf-case"
PARAM_FORMAT = "oldf-params"
VERSION = 1


class CaseError(ValueError):
    """Schema or semantic problem in an input file; ``where`` locates it."""

    def __init__(self, msg: str, where: str = ""):
        self.where = where
        super().__init__(f"{where}: {msg}" if where else msg)


class FingerprintError(ValueError):
    pass


@dataclass
class CaseFile:
    network: RadialNetwork | ThreePhaseNetwork
    p: np.ndarray  # net active injection per non-substation bus (or bus-phase pair), p.u.
    q: np.ndarray
    base_mva: float
    name: str = ""
    bus_labels: tuple = ()
    base_kv: float | None = None
    version: int = VERSION
    meta: dict = field(default_factory=dict)

    @property
    def three_phase(self) -> bool:
        return isinstance(self.network, ThreePhaseNetwork)

    def to_mw(self, x_pu):
        return np.asarray(x_pu) * self.base_mva


# -- helpers -------------------------------------------------------------------


def _get(obj: dict, key: str, kind, where: str, default: Any = ...):
    if key not in obj:
        if default is ...:
            raise CaseError(f"missing field {key!r}", where)
        return default
    val = obj[key]
    if kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise CaseError(f"field {key!r} must be a number, got {type(val).__name__}", where)
        return float(val)
    if kind is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise CaseError(f"field {key!r} must be an integer, got {type(val).__name__}", where)
        return val
    if not isinstance(val, kind):
        raise CaseError(f"field {key!r} must be {kind.__name__}, got {type(val).__name__}", where)
    return val


def _z_base(base_kv: float | None, base_mva: float, where: str) -> float:
    if base_kv is None or base_kv <= 0:
        raise CaseError("impedances in ohm need a positive base_kv", where)
    return base_kv**2 / base_mva


# -- native JSON ---------------------------------------------------------------


def parse_case_json(data: bytes | str) -> CaseFile:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise CaseError(f"invalid JSON: {e.msg}", f"line {e.lineno}") from None
    if not isinstance(doc, dict):
        raise CaseError("top level must be an object")
    fmt = doc.get("format", CASE_FORMAT)
    if fmt != CASE_FORMAT:
        raise CaseError(f"unknown format {fmt!r}", "format")
    version = _get(doc, "version", int, "version", VERSION)
    if version != VERSION:
        raise CaseError(f"unsupported version {version}", "version")
    base_mva = _get(doc, "base_mva", float, "base_mva")
    if base_mva <= 0:
        raise CaseError("base_mva must be positive", "base_mva")
    base_kv = _get(doc, "base_kv", float, "base_kv", None)
    unit = _get(doc, "impedance_unit", str, "impedance_unit", "pu")
    if unit not in ("pu", "ohm"):
        raise CaseError(f"impedance_unit must be 'pu' or 'ohm', got {unit!r}", "impedance_unit")
    zb = _z_base(base_kv, base_mva, "base_kv") if unit == "ohm" else 1.0
    buses = _get(doc, "buses", list, "buses")
    if not buses:
        raise CaseError("no buses", "buses")
    sub = _get(doc, "substation", int, "substation")
    vm0 = _get(doc, "substation_vm", float, "substation_vm", 1.0)
    three = bool(doc.get("three_phase", False))

    labels = []
    for i, b in enumerate(buses):
        if not isinstance(b, dict):
            raise CaseError("bus entries must be objects", f"buses[{i}]")
        labels.append(_get(b, "id", int, f"buses[{i}]"))
    if len(set(labels)) != len(labels):
        raise CaseError("duplicate bus ids", "buses")
    if sub not in labels:
        raise CaseError(f"substation bus {sub} is not listed", "substation")
    order = [sub] + [b for b in labels if b != sub]
    idx = {lab: k for k, lab in enumerate(order)}
    n = len(order) - 1

    branches = _get(doc, "branches", list, "branches")
    switchable = doc.get("switchable", [])
    if not isinstance(switchable, list) or not all(isinstance(s, int) for s in switchable):
        raise CaseError("switchable must be a list of branch ids", "switchable")

    def bus_ref(val, where):
        if isinstance(val, bool) or not isinstance(val, int):
            raise CaseError("bus reference must be an integer", where)
        if val not in idx:
            raise CaseError(f"unknown bus {val}", where)
        return idx[val]

    if three:
        return _parse_three_phase(doc, buses, branches, idx, order, n, base_mva, base_kv, zb, vm0)

    closed, opened = [], []
    for i, br in enumerate(branches):
        w = f"branches[{i}]"
        if not isinstance(br, dict):
            raise CaseError("branch entries must be objects", w)
        bid = _get(br, "id", int, w)
        a = bus_ref(_get(br, "from", int, w), w + ".from")
        b = bus_ref(_get(br, "to", int, w), w + ".to")
        r = _get(br, "r", float, w) / zb
        x = _get(br, "x", float, w) / zb
        if r < 0 or x < 0:
            raise CaseError("negative impedance", w)
        status = _get(br, "status", int, w, 1)
        (closed if status else opened).append(Branch(bid, a, b, r, x))
    try:
        oriented = orient(n, closed)
    except NetworkError as e:
        raise CaseError(str(e), "branches") from None
    p = np.zeros(n)
    q = np.zeros(n)
    for i, b in enumerate(buses):
        k = idx[b["id"]]
        pl = _get(b, "p_mw", float, f"buses[{i}]", 0.0)
        ql = _get(b, "q_mvar", float, f"buses[{i}]", 0.0)
        if k == 0:
            if pl or ql:
                log.warning("load at the substation bus is ignored")
            continue
        p[k - 1] = -pl / base_mva
        q[k - 1] = -ql / base_mva
    try:
        net = RadialNetwork(n, oriented, vm0**2, tuple(opened), frozenset(switchable))
    except NetworkError as e:
        raise CaseError(str(e), "branches") from None
    return CaseFile(net, p, q, base_mva, doc.get("name", ""), tuple(order), base_kv, version, doc.get("meta", {}))


def _parse_three_phase(doc, buses, branches, idx, order, n, base_mva, base_kv, zb, vm0) -> CaseFile:
    phases = ["abc"] * (n + 1)
    for i, b in enumerate(buses):
        phases[idx[b["id"]]] = _get(b, "phases", str, f"buses[{i}]", "abc")
    brs = []
    for i, br in enumerate(branches):
        w = f"branches[{i}]"
        bid = _get(br, "id", int, w)
        a, c = _get(br, "from", int, w), _get(br, "to", int, w)
        for v, f in ((a, "from"), (c, "to")):
            if v not in idx:
                raise CaseError(f"unknown bus {v}", f"{w}.{f}")
        ph = _get(br, "phases", str, w, "abc")
        r = np.array(_get(br, "r", list, w), dtype=float) / zb
        x = np.array(_get(br, "x", list, w), dtype=float) / zb
        if _get(br, "status", int, w, 1) != 1:
            raise CaseError("open branches are not supported in three-phase cases", w)
        try:
            brs.append(Branch3(bid, idx[a], idx[c], ph, r + 1j * x))
        except NetworkError as e:
            raise CaseError(str(e), w) from None
    try:
        net = ThreePhaseNetwork(n, tuple(phases), tuple(brs), (vm0**2,) * 3)
    except NetworkError as e:
        raise CaseError(str(e), "branches") from None
    p = np.zeros(net.n_pairs)
    q = np.zeros(net.n_pairs)
    for i, b in enumerate(buses):
        k = idx[b["id"]]
        loads_p = b.get("p_mw", {}) or {}
        loads_q = b.get("q_mvar", {}) or {}
        for name, tgt, src in (("p_mw", p, loads_p), ("q_mvar", q, loads_q)):
            if not isinstance(src, dict):
                raise CaseError(f"{name} must map phase -> value in three-phase cases", f"buses[{i}]")
            for ph, val in src.items():
                if k == 0:
                    continue
                if (k, ph) not in net.pair_index:
                    raise CaseError(f"load on absent phase {ph!r}", f"buses[{i}]")
                tgt[net.pair_index[(k, ph)]] = -float(val) / base_mva
    return CaseFile(net, p, q, base_mva, doc.get("name", ""), tuple(order), base_kv, VERSION, doc.get("meta", {}))


def case_to_json(case: CaseFile) -> str:
    """Serialize a case back to the native schema (impedances in p.u.)."""
    net = case.network
    labels = list(case.bus_labels) or list(range(net.n + 1))
    doc: dict[str, Any] = {
        "format": CASE_FORMAT,
        "version": VERSION,
        "name": case.name,
        "base_mva": case.base_mva,
        "impedance_unit": "pu",
        "substation": labels[0],
    }
    if case.base_kv is not None:
        doc["base_kv"] = case.base_kv
    buses = []
    if isinstance(net, ThreePhaseNetwork):
        doc["three_phase"] = True
        doc["substation_vm"] = float(np.sqrt(net.v0[0]))
        for k in range(net.n + 1):
            entry = {"id": labels[k], "phases": net.bus_phases[k]}
            if k:
                entry["p_mw"] = {ph: -float(case.p[net.pair_index[(k, ph)]]) * case.base_mva for ph in net.bus_phases[k]}
                entry["q_mvar"] = {ph: -float(case.q[net.pair_index[(k, ph)]]) * case.base_mva for ph in net.bus_phases[k]}
            buses.append(entry)
        doc["buses"] = buses
        doc["branches"] = [
            {
                "id": b.id,
                "from": labels[b.parent],
                "to": labels[b.child],
                "phases": b.phases,
                "r": b.z.real.tolist(),
                "x": b.z.imag.tolist(),
            }
            for b in net.branches
        ]
        return json.dumps(doc, indent=1)
    doc["substation_vm"] = float(np.sqrt(net.v0))
    for k in range(net.n + 1):
        entry = {"id": labels[k]}
        if k:
            entry["p_mw"] = -float(case.p[k - 1]) * case.base_mva
            entry["q_mvar"] = -float(case.q[k - 1]) * case.base_mva
        buses.append(entry)
    doc["buses"] = buses
    brs = []
    for b, status in [(b, 1) for b in net.branches] + [(b, 0) for b in net.open_branches]:
        brs.append({"id": b.id, "from": labels[b.parent], "to": labels[b.child], "r": b.r, "x": b.x, "status": status})
    doc["branches"] = sorted(brs, key=lambda e: e["id"])
    if net.switchable_ids:
        doc["switchable"] = sorted(net.switchable_ids)
    return json.dumps(doc, indent=1)


def load_case(path: str | Path) -> CaseFile:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".m":
        return parse_matpower_subset(text)
    return parse_case_json(text)


# -- MATPOWER subset -----------------------------------------------------------

_MAT_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.S)
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([-+0-9.eE]+)\s*;")


def _parse_matrix(body: str, name: str, line0: int) -> list[list[float]]:
    rows = []
    for k, raw in enumerate(body.split("\n")):
        line = raw.split("%", 1)[0]
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                rows.append([float(tok) for tok in chunk.replace(",", " ").split()])
            except ValueError:
                raise CaseError(f"unparseable row {chunk!r}", f"mpc.{name}, line {line0 + k}") from None
    return rows


def parse_matpower_subset(text: str) -> CaseFile:
    """Read baseMVA, bus and branch tables of a MATPOWER case (single-phase).

    Branch r, x are taken as per-unit; status 0 branches become open branches.
    Generators other than the slack are ignored.
    """
    # strip comment-only lines before matching so '%' in comments cannot confuse the regex
    clean = "\n".join(line.split("%", 1)[0] for line in text.split("\n"))
    scalars = {m.group(1): float(m.group(2)) for m in _SCALAR_RE.finditer(clean)}
    if "baseMVA" not in scalars:
        raise CaseError("missing mpc.baseMVA")
    base_mva = scalars["baseMVA"]
    mats = {}
    for m in _MAT_RE.finditer(clean):
        line0 = clean[: m.start(2)].count("\n") + 1
        mats[m.group(1)] = _parse_matrix(m.group(2), m.group(1), line0)
    for need in ("bus", "branch"):
        if need not in mats:
            raise CaseError(f"missing mpc.{need}")
    bus, branch = mats["bus"], mats["branch"]
    for i, row in enumerate(bus):
        if len(row) < 4:
            raise CaseError("bus row needs at least 4 columns", f"mpc.bus row {i + 1}")
    slack = [int(r[0]) for r in bus if int(r[1]) == 3]
    if len(slack) != 1:
        raise CaseError(f"expected exactly one slack bus, found {len(slack)}", "mpc.bus")
    sub = slack[0]
    labels = [sub] + [int(r[0]) for r in bus if int(r[0]) != sub]
    idx = {lab: k for k, lab in enumerate(labels)}
    if len(idx) != len(bus):
        raise CaseError("duplicate bus numbers", "mpc.bus")
    n = len(labels) - 1
    vm0 = 1.0
    for r in bus:
        if int(r[0]) == sub and len(r) > 7:
            vm0 = r[7]
    gens = mats.get("gen", [])
    for g in gens:
        if int(g[0]) == sub and len(g) > 5:
            vm0 = g[5]
    n_other = sum(1 for g in gens if int(g[0]) != sub)
    if n_other:
        log.warning("ignoring %d non-slack generator rows", n_other)
    p = np.zeros(n)
    q = np.zeros(n)
    for r in bus:
        k = idx[int(r[0])]
        if k:
            p[k - 1] = -r[2] / base_mva
            q[k - 1] = -r[3] / base_mva
    closed, opened = [], []
    for i, r in enumerate(branch):
        if len(r) < 4:
            raise CaseError("branch row needs at least 4 columns", f"mpc.branch row {i + 1}")
        a, b = int(r[0]), int(r[1])
        for v in (a, b):
            if v not in idx:
                raise CaseError(f"unknown bus {v}", f"mpc.branch row {i + 1}")
        status = int(r[10]) if len(r) > 10 else 1
        br = Branch(i + 1, idx[a], idx[b], float(r[2]), float(r[3]))
        (closed if status else opened).append(br)
    try:
        oriented = orient(n, closed)
    except NetworkError as e:
        raise CaseError(str(e), "mpc.branch") from None
    net = RadialNetwork(n, oriented, vm0**2, tuple(opened), frozenset(b.id for b in opened))
    return CaseFile(net, p, q, base_mva, "matpower", tuple(labels))


# -- parameters ----------------------------------------------------------------


def fingerprint(network: RadialNetwork | ThreePhaseNetwork) -> str:
    payload = json.dumps(network.fingerprint_payload(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class ParamFile:
    fingerprint: str
    params: Any  # LdfParams or Ldf3Params
    meta: dict = field(default_factory=dict)


def write_params(pf: ParamFile) -> str:
    from .lindistflow import Ldf3Params, LdfParams

    p = pf.params
    if isinstance(p, LdfParams):
        body = {
            "kind": "ldf",
            "branch_ids": list(p.branch_ids),
            "dr": p.dr.tolist(),
            "dx": p.dx.tolist(),
            "gamma": p.gamma.tolist(),
            "rho": p.rho.tolist(),
            "varrho": p.varrho.tolist(),
        }
    elif isinstance(p, Ldf3Params):
        body = {
            "kind": "ldf3",
            "hp": [h.tolist() for h in p.hp],
            "hq": [h.tolist() for h in p.hq],
            "gamma": p.gamma.tolist(),
            "rho": p.rho.tolist(),
            "varrho": p.varrho.tolist(),
        }
    else:
        raise TypeError(f"cannot serialize {type(p).__name__}")
    for key in ("dr", "dx", "gamma", "rho", "varrho"):
        if key in body and not np.all(np.isfinite(body[key])):
            raise ValueError(f"non-finite entries in {key}")
    doc = {"format": PARAM_FORMAT, "version": VERSION, "fingerprint": pf.fingerprint, "params": body, "meta": pf.meta}
    return json.dumps(doc, indent=1, allow_nan=False)


def read_params(text: str, network: RadialNetwork | ThreePhaseNetwork) -> ParamFile:
    """Parse a parameter file and check it was trained for ``network``."""
    from .lindistflow import Ldf3Params, LdfParams

    doc = json.loads(text)
    if doc.get("format") != PARAM_FORMAT:
        raise CaseError("not a parameter file", "format")
    fp = fingerprint(network)
    if doc["fingerprint"] != fp:
        raise FingerprintError(
            "parameters were trained on a different feeder or topology "
            f"(file {doc['fingerprint'][:12]}..., network {fp[:12]}...)"
        )
    body = doc["params"]
    if body["kind"] == "ldf":
        params = LdfParams(
            np.array(body["dr"], dtype=float),
            np.array(body["dx"], dtype=float),
            np.array(body["gamma"], dtype=float),
            np.array(body["rho"], dtype=float),
            np.array(body["varrho"], dtype=float),
            tuple(body["branch_ids"]),
        )
        params.check(network)
    elif body["kind"] == "ldf3":
        params = Ldf3Params(
            tuple(np.array(h, dtype=float) for h in body["hp"]),
            tuple(np.array(h, dtype=float) for h in body["hq"]),
            np.array(body["gamma"], dtype=float),
            np.array(body["rho"], dtype=float),
            np.array(body["varrho"], dtype=float),
        )
        params.check(network)
    else:
        raise CaseError(f"unknown parameter kind {body['kind']!r}", "params.kind")
    return ParamFile(doc["fingerprint"], params, doc.get("meta", {}))


# -- scenarios -----------------------------------------------------------------


def write_scenarios_csv(p: np.ndarray, q: np.ndarray) -> str:
    p = np.atleast_2d(p)
    q = np.atleast_2d(q)
    n = p.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"p_{i}" for i in range(1, n + 1)] + [f"q_{i}" for i in range(1, n + 1)])
    for pr, qr in zip(p, q):
        w.writerow([repr(float(v)) for v in pr] + [repr(float(v)) for v in qr])
    return buf.getvalue()


def read_scenarios_csv(text: str, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise CaseError("empty scenario file")
    header = rows[0]
    if len(header) % 2:
        raise CaseError("scenario header must have p_1..p_n,q_1..q_n columns", "line 1")
    m = len(header) // 2
    expect = [f"p_{i}" for i in range(1, m + 1)] + [f"q_{i}" for i in range(1, m + 1)]
    if header != expect:
        raise CaseError("scenario header must be p_1..p_n,q_1..q_n", "line 1")
    if n is not None and m != n:
        raise CaseError(f"scenario file has {m} buses, network has {n}", "line 1")
    data = []
    for k, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2 * m:
            raise CaseError(f"expected {2 * m} values, got {len(row)}", f"line {k}")
        try:
            data.append([float(v) for v in row])
        except ValueError:
            raise CaseError("non-numeric value", f"line {k}") from None
    arr = np.array(data, dtype=float).reshape(-1, 2 * m)
    return arr[:, :m], arr[:, m:]


__all__ = [
    "CaseError",
    "CaseFile",
    "FingerprintError",
    "ParamFile",
    "case_to_json",
    "fingerprint",
    "load_case",
    "parse_case_json",
    "parse_matpower_subset",
    "read_params",
    "read_scenarios_csv",
    "write_params",
    "write_scenarios_csv",
]
