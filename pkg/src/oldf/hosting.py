"""Hosting capacity of inverter-based generation under a linear voltage model.

The second-order cones (generator capability disk, line and transformer
apparent-power limits) are replaced by inscribed regular K-gons, which turns
the problem into a QP solved by :func:`oldf.qp.solve_qp`.  Setpoints are then
checked against the nonlinear DistFlow solution.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .distflow import solve_distflow_batch
from .lindistflow import LdfParams, nominal_params, oldf_voltages, voltage_sensitivity
from .network import RadialNetwork
from .qp import OPTIMAL, QpOptions, solve_qp
from .training import ScenarioSet, sample_training_scenarios

log = logging.getLogger(__name__)

DEFAULT_FACETS = 32


@dataclass
class HostingProblem:
    """Generator buses are internal indices 1..n; all powers in per-unit."""

    gen_buses: np.ndarray
    pbar: np.ndarray
    sbar: np.ndarray
    p_base: np.ndarray
    q_base: np.ndarray
    xi: float = 0.02
    vmin: float = 0.95**2  # squared
    vmax: float = 1.05**2
    line_limits: np.ndarray | float | None = None  # per branch position, or scalar
    transformer_limit: float | None = None
    model: str = "ldf"
    params: LdfParams | None = None
    facets: int = DEFAULT_FACETS

    def __post_init__(self):
        self.gen_buses = np.asarray(self.gen_buses, dtype=int)
        self.pbar = np.asarray(self.pbar, dtype=float)
        self.sbar = np.asarray(self.sbar, dtype=float)
        if not (len(self.gen_buses) == len(self.pbar) == len(self.sbar)):
            raise ValueError("gen_buses, pbar and sbar must have equal length")
        if np.any(self.pbar < 0) or np.any(self.pbar > self.sbar):
            raise ValueError("need 0 <= pbar <= sbar for every generator")
        if not self.vmin < self.vmax:
            raise ValueError("vmin must be below vmax")
        if self.xi < 0:
            raise ValueError("xi must be non-negative")
        if self.facets < 3:
            raise ValueError("polygons need at least 3 facets")
        if self.model not in ("ldf", "oldf"):
            raise ValueError("model must be 'ldf' or 'oldf'")
        if self.model == "oldf" and self.params is None:
            raise ValueError("the OLDF model needs trained parameters")

    def with_model(self, model: str, params: LdfParams | None = None, facets: int | None = None) -> "HostingProblem":
        kw = {**self.__dict__, "model": model, "params": params}
        if facets is not None:
            kw["facets"] = facets
        return HostingProblem(**kw)


@dataclass
class QpData:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray
    labels: list[str]
    v_fixed: np.ndarray
    Mv: np.ndarray
    free: np.ndarray  # positions (into the generator list) of the decision variables


@dataclass
class ValidationReport:
    converged: bool
    vm: np.ndarray
    v_low_margin: np.ndarray  # magnitude p.u., negative when violated
    v_high_margin: np.ndarray
    line_margin: np.ndarray
    transformer_margin: float
    worst_violation: float
    worst_location: str
    voltage_violation: float

    def voltage_violations(self, slack: float = 1e-4) -> list[int]:
        bad = (self.v_low_margin < -slack) | (self.v_high_margin < -slack)
        return [int(b) + 1 for b in np.flatnonzero(bad)]

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "worst_violation": self.worst_violation,
            "worst_location": self.worst_location,
            "voltage_violation": self.voltage_violation,
            "vm": self.vm.tolist(),
            "transformer_margin": self.transformer_margin,
        }


@dataclass
class HostingSolution:
    pg: np.ndarray
    qg: np.ndarray
    objective: float
    status: str
    v_model: np.ndarray
    iterations: int = 0
    duals: np.ndarray | None = None
    worst_constraint: str = ""
    validation: ValidationReport | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {
            "status": self.status,
            "objective": self.objective,
            "pg": self.pg.tolist(),
            "qg": self.qg.tolist(),
            "v_model": self.v_model.tolist(),
            "iterations": self.iterations,
        }
        if self.worst_constraint:
            out["worst_constraint"] = self.worst_constraint
        if self.validation is not None:
            out["validation"] = self.validation.to_dict()
        return out


def polygon_normals(K: int) -> np.ndarray:
    """Facet normals of the regular K-gon inscribed in the unit circle with a vertex at angle 0.

    Vertices sit at multiples of 2*pi/K, so doubling K keeps every old vertex
    and the feasible polygon only grows.
    """
    th = (2 * np.arange(K) + 1) * np.pi / K
    return np.stack([np.cos(th), np.sin(th)], axis=1)


def objective_value(problem: HostingProblem, pg, qg) -> float:
    on = problem.pbar > 0
    pb, sb = problem.pbar[on], problem.sbar[on]
    return float(np.sum((pb - pg[on]) ** 2 / pb + problem.xi * qg[on] ** 2 / sb))


def build_qp(network: RadialNetwork, problem: HostingProblem) -> QpData:
    """Assemble the polygonal QP in the variables [pg (free gens), qg (free gens)]."""
    pr = problem
    n = network.n
    free = np.flatnonzero(pr.pbar > 0)
    G = len(free)
    idx = pr.gen_buses[free] - 1
    params = nominal_params(network) if pr.model == "ldf" else pr.params
    Sp, Sq = voltage_sensitivity(network, params.dr, params.dx)
    v_fixed = oldf_voltages(network, params, pr.p_base, pr.q_base)
    Mv = np.hstack([Sp[:, idx], Sq[:, idx]])

    pb, sb = pr.pbar[free], pr.sbar[free]
    P = np.diag(np.concatenate([2 / pb, 2 * pr.xi / sb]))
    q = np.concatenate([-2 * np.ones(G), np.zeros(G)])
    rows, lo, hi, labels = [], [], [], []

    def add(a, l, u, name):
        rows.append(a)
        lo.append(l)
        hi.append(u)
        labels.append(name)

    N = polygon_normals(pr.facets)
    shrink = np.cos(np.pi / pr.facets)
    for g in range(G):
        bus = int(pr.gen_buses[free[g]])
        e = np.zeros(2 * G)
        e[g] = 1
        add(e, 0.0, pb[g], f"p_box@bus{bus}")
        for k, (c, s) in enumerate(N):
            a = np.zeros(2 * G)
            a[g], a[G + g] = c, s
            add(a, -np.inf, sb[g] * shrink, f"capability[{k}]@bus{bus}")
    for b in range(n):
        add(Mv[b], pr.vmin - v_fixed[b], pr.vmax - v_fixed[b], f"voltage@bus{b + 1}")

    # lossless flows P = A^-T p = -T^T p, affine in the setpoints
    Tt = network.path_matrix_t.toarray()
    P0 = -Tt @ pr.p_base
    Q0 = -Tt @ pr.q_base
    Fp = -Tt[:, idx]
    limits = pr.line_limits
    if limits is not None:
        limits = np.broadcast_to(np.asarray(limits, dtype=float), (n,))
        for b in range(n):
            if not np.isfinite(limits[b]):
                continue
            bid = network.branches[b].id
            for k, (c, s) in enumerate(N):
                a = np.concatenate([c * Fp[b], s * Fp[b]])
                add(a, -np.inf, limits[b] * shrink - c * P0[b] - s * Q0[b], f"line[{k}]@branch{bid}")
    if pr.transformer_limit is not None:
        root = network.root_branches
        PT0, QT0 = P0[root].sum(), Q0[root].sum()
        FT = Fp[root].sum(axis=0)
        for k, (c, s) in enumerate(N):
            a = np.concatenate([c * FT, s * FT])
            add(a, -np.inf, pr.transformer_limit * shrink - c * PT0 - s * QT0, f"transformer[{k}]")
    A = np.array(rows).reshape(len(rows), 2 * G)
    return QpData(P, q, A, np.array(lo), np.array(hi), labels, v_fixed, Mv, free)


def solve_hosting(network: RadialNetwork, problem: HostingProblem, opts: QpOptions | None = None) -> HostingSolution:
    qp = build_qp(network, problem)
    ng = len(problem.gen_buses)
    pg, qg = np.zeros(ng), np.zeros(ng)
    G = len(qp.free)
    if G == 0:
        viol = np.maximum(qp.l, 0) + np.maximum(-qp.u, 0)
        ok = viol.max(initial=0.0) <= 1e-12
        status = OPTIMAL if ok else "infeasible"
        worst = "" if ok else qp.labels[int(np.argmax(viol))]
        return HostingSolution(pg, qg, 0.0, status, qp.v_fixed, 0, None, worst)
    res = solve_qp(qp.P, qp.q, qp.A, qp.l, qp.u, opts)
    pg[qp.free] = res.x[:G]
    qg[qp.free] = res.x[G:]
    worst = "" if res.status == OPTIMAL else qp.labels[res.worst]
    if res.status != OPTIMAL:
        log.warning("hosting QP %s; most violated constraint: %s", res.status, worst)
    v = qp.v_fixed + qp.Mv @ res.x
    return HostingSolution(pg, qg, objective_value(problem, pg, qg), res.status, v, res.iterations, res.y, worst)


def validate_with_distflow(network: RadialNetwork, problem: HostingProblem, solution: HostingSolution) -> ValidationReport:
    """Solve DistFlow at base load plus the setpoints and report limit margins.

    Voltage margins are in magnitude p.u.; flow margins in p.u. apparent power
    at the sending end.
    """
    if not (np.all(np.isfinite(solution.pg)) and np.all(np.isfinite(solution.qg))):
        raise ValueError("setpoints must be finite")
    p = problem.p_base.copy()
    q = problem.q_base.copy()
    np.add.at(p, problem.gen_buses - 1, solution.pg)
    np.add.at(q, problem.gen_buses - 1, solution.qg)
    sol = solve_distflow_batch(network, p[None], q[None])[0]
    n = network.n
    if not sol.converged:
        rep = ValidationReport(False, np.full(n, np.nan), np.full(n, np.nan), np.full(n, np.nan), np.full(n, np.nan), np.nan, np.inf, "DistFlow did not converge", np.inf)
        solution.validation = rep
        return rep
    vm = np.sqrt(sol.v)
    lo = vm - np.sqrt(problem.vmin)
    hi = np.sqrt(problem.vmax) - vm
    S = np.hypot(sol.P, sol.Q)
    line = np.full(n, np.inf)
    if problem.line_limits is not None:
        line = np.broadcast_to(np.asarray(problem.line_limits, dtype=float), (n,)) - S
    root = network.root_branches
    tm = np.inf
    if problem.transformer_limit is not None:
        tm = problem.transformer_limit - float(np.hypot(sol.P[root].sum(), sol.Q[root].sum()))
    cands = [
        (-lo.min(), f"undervoltage@bus{int(lo.argmin()) + 1}"),
        (-hi.min(), f"overvoltage@bus{int(hi.argmin()) + 1}"),
        (-line.min(), f"line@branch{network.branches[int(line.argmin())].id}"),
        (-tm, "transformer"),
    ]
    worst, where = max(cands, key=lambda t: t[0])
    vviol = max(0.0, -lo.min(), -hi.min())
    rep = ValidationReport(True, vm, lo, hi, line, tm, max(worst, 0.0), where if worst > 0 else "", vviol)
    solution.validation = rep
    return rep


# -- problem files ---------------------------------------------------------------


def parse_hosting_json(text: str, case) -> tuple[HostingProblem, dict]:
    """Build a problem from the hosting JSON format and a loaded case.

    Returns the problem (LDF model selected) and the optional ``training``
    block used to fit hosting-specific OLDF parameters.
    """
    doc = json.loads(text)
    if doc.get("format") != "oldf-hosting":
        raise ValueError("not an oldf-hosting file (missing format tag)")
    base = float(case.base_mva)
    labels = list(case.bus_labels)
    buses, pbar, sbar = [], [], []
    for k, g in enumerate(doc["generators"]):
        if g["bus"] not in labels[1:]:
            raise ValueError(f"generators[{k}]: unknown bus {g['bus']}")
        s = float(g["s_mva"]) / base
        p = float(g["p_max_mw"]) / base if "p_max_mw" in g else float(g.get("pf", 1.0)) * s
        buses.append(labels.index(g["bus"]))
        pbar.append(p)
        sbar.append(s)
    line = doc.get("line_limit_mva")
    tr = doc.get("transformer_limit_mva")
    prob = HostingProblem(
        np.array(buses),
        np.array(pbar),
        np.array(sbar),
        np.asarray(case.p, dtype=float),
        np.asarray(case.q, dtype=float),
        xi=float(doc.get("xi", 0.02)),
        vmin=float(doc.get("v_min_pu", 0.95)) ** 2,
        vmax=float(doc.get("v_max_pu", 1.05)) ** 2,
        line_limits=None if line is None else float(line) / base,
        transformer_limit=None if tr is None else float(tr) / base,
        facets=int(doc.get("facets", DEFAULT_FACETS)),
    )
    return prob, doc.get("training", {})


def hosting_training_scenarios(problem: HostingProblem, count: int = 20, seed: int = 0, std: float = 0.35) -> ScenarioSet:
    """Load draws as in ordinary training plus random generator output.

    Each generator's active output is Uniform(0, pbar) and its reactive output
    Uniform(-sbar, sbar), so the fitted model covers the region the hosting
    problem searches.
    """
    base = sample_training_scenarios(problem.p_base, problem.q_base, count, seed, std)
    rng = np.random.default_rng([seed, 1])
    G = len(problem.gen_buses)
    pg = rng.uniform(0.0, 1.0, (count, G)) * problem.pbar
    qg = rng.uniform(-1.0, 1.0, (count, G)) * problem.sbar
    p, q = base.p.copy(), base.q.copy()
    for g, bus in enumerate(problem.gen_buses):
        p[:, bus - 1] += pg[:, g]
        q[:, bus - 1] += qg[:, g]
    return ScenarioSet(p, q, "hosting", seed)
