"""Accuracy metrics, LDF/OLDF comparison tables, and the cross-topology study."""

from __future__ import annotations

import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .lindistflow import LdfParams, Ldf3Params, ldf3_voltages, ldf_voltages, nominal_h_blocks, oldf_voltages
from .network import RadialNetwork, ThreePhaseNetwork, TopologyConfig, apply_topology
from .training import ScenarioSet, TrainOptions, Truth, solve_truth, train

log = logging.getLogger(__name__)

MAGNITUDE = "magnitude"
SQUARED = "squared"


@dataclass
class ErrorReport:
    eps_max: float
    eps_avg: float
    worst_bus: np.ndarray  # per scenario, bus index 1..n (or pair index for 3-phase)
    n_used: int
    n_dropped: int = 0
    space: str = MAGNITUDE

    def row(self) -> dict:
        return {"eps_avg": self.eps_avg, "eps_max": self.eps_max, "n_used": self.n_used, "n_dropped": self.n_dropped}


def error_metrics(truth, approx, space: str = MAGNITUDE, n_dropped: int = 0) -> ErrorReport:
    """Max and mean absolute voltage error.

    ``truth`` and ``approx`` are squared voltages with shape (S, n).  By default
    the errors are taken between voltage magnitudes (square roots); pass
    ``space="squared"`` to compare the squared values directly.
    """
    t = np.atleast_2d(np.asarray(truth, dtype=float))
    a = np.atleast_2d(np.asarray(approx, dtype=float))
    if t.size == 0 or a.size == 0:
        raise ValueError("no scenarios to evaluate")
    if t.shape != a.shape:
        raise ValueError(f"shape mismatch: truth {t.shape}, approx {a.shape}")
    if space == MAGNITUDE:
        err = np.abs(np.sqrt(np.maximum(a, 0.0)) - np.sqrt(t))
    elif space == SQUARED:
        err = np.abs(a - t)
    else:
        raise ValueError(f"unknown space {space!r}")
    return ErrorReport(float(err.max()), float(err.mean()), err.argmax(axis=1) + 1, t.shape[0], n_dropped, space)


def model_voltages(network, params, p, q) -> np.ndarray:
    """Squared voltages from the approximation; ``params=None`` means nominal LDF."""
    if isinstance(network, ThreePhaseNetwork):
        return ldf3_voltages(network, params or nominal_h_blocks(network), p, q)
    if params is None:
        return ldf_voltages(network, p, q)
    return oldf_voltages(network, params, p, q)


def compare_models(
    network,
    params: LdfParams | Ldf3Params,
    scenarios: ScenarioSet,
    truth: Truth | None = None,
    space: str = MAGNITUDE,
) -> dict[str, ErrorReport]:
    """LDF and OLDF error reports on the same (post-drop) scenarios."""
    truth = truth or solve_truth(network, scenarios)
    sc = truth.scenarios
    out = {}
    for name, prm in (("LDF", None), ("OLDF", params)):
        v = np.atleast_2d(model_voltages(network, prm, sc.p, sc.q))
        out[name] = error_metrics(truth.v, v, space, truth.dropped)
    return out


def comparison_csv(table: dict[str, ErrorReport], label: str = "") -> str:
    buf = io.StringIO()
    buf.write("case,model,eps_avg,eps_max,n_used,n_dropped\n")
    for name, rep in table.items():
        buf.write(f"{label},{name},{float(rep.eps_avg)!r},{float(rep.eps_max)!r},{rep.n_used},{rep.n_dropped}\n")
    return buf.getvalue()


# -- topology study ------------------------------------------------------------


def adapt_params(params: LdfParams, source: RadialNetwork, target: RadialNetwork) -> LdfParams:
    """Carry trained parameters over to another topology of the same feeder.

    Coefficients follow their branch id; branches absent from ``source`` get
    the target's nominal r and x.  Bias vectors are per bus and kept unchanged.
    """
    if source.n != target.n:
        raise ValueError("topologies must share the bus set")
    trained = {bid: (dr, dx) for bid, dr, dx in zip(source.branch_ids, params.dr, params.dx)}
    dr = np.array([trained.get(b.id, (b.r, b.x))[0] for b in target.branches])
    dx = np.array([trained.get(b.id, (b.r, b.x))[1] for b in target.branches])
    return LdfParams(dr, dx, params.gamma, params.rho, params.varrho, target.branch_ids)


@dataclass
class TopologyResult:
    configs: list[TopologyConfig]
    matrix: np.ndarray  # [i, j]: eps_avg of params trained on i, evaluated on j
    baseline: np.ndarray  # LDF eps_avg on j
    failed: list[int] = field(default_factory=list)
    space: str = MAGNITUDE

    @property
    def dominance(self) -> np.ndarray:
        return self.matrix < self.baseline[None, :]

    def diagonal_ok(self) -> bool:
        ok = [self.dominance[i, i] for i in range(len(self.configs)) if i not in self.failed]
        return bool(np.all(ok))

    @property
    def labels(self) -> list[str]:
        return [c.label() for c in self.configs]

    def matrix_csv(self, which: str = "eps") -> str:
        data = self.matrix if which == "eps" else self.dominance.astype(int)
        buf = io.StringIO()
        buf.write("trained\\evaluated," + ",".join(f'"{s}"' for s in self.labels) + "\n")
        for lab, row in zip(self.labels, data):
            buf.write(f'"{lab}",' + ",".join(repr(float(v)) if which == "eps" else str(int(v)) for v in row) + "\n")
        if which == "eps":
            buf.write('"LDF",' + ",".join(repr(float(v)) for v in self.baseline) + "\n")
        return buf.getvalue()

    def long_csv(self) -> str:
        buf = io.StringIO()
        buf.write("topology_i,topology_j,eps_avg,ldf_eps_avg,beats_ldf\n")
        for i in range(len(self.configs)):
            for j in range(len(self.configs)):
                buf.write(f"{i + 1},{j + 1},{float(self.matrix[i, j])!r},{float(self.baseline[j])!r},{int(self.dominance[i, j])}\n")
        return buf.getvalue()


def _train_one(args):
    net, train_set, opts = args
    try:
        params, rep = train(net, train_set, opts)
    except Exception as exc:  # reported as a failed row
        log.warning("training failed: %s", exc)
        return None, str(exc)
    return params, rep.exit_reason


def _pool_map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(a) for a in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def topology_sweep(
    base: RadialNetwork,
    configs: list[TopologyConfig],
    train_set: ScenarioSet,
    test_set: ScenarioSet,
    opts: TrainOptions | None = None,
    jobs: int | None = None,
    space: str = MAGNITUDE,
) -> TopologyResult:
    """Train on every topology and evaluate each parameter set on every topology.

    The same training and test injections (scaled from the base feeder's
    loads) are reused for all topologies.  Failed rows hold NaN.
    """
    jobs = jobs or os.cpu_count() or 1
    nets = [apply_topology(base, c) for c in configs]
    trained = _pool_map(_train_one, [(net, train_set, opts) for net in nets], jobs)
    truths = [solve_truth(net, test_set) for net in nets]
    T = len(nets)
    matrix = np.full((T, T), np.nan)
    baseline = np.empty(T)
    for j, (net, tr) in enumerate(zip(nets, truths)):
        baseline[j] = error_metrics(tr.v, ldf_voltages(net, tr.scenarios.p, tr.scenarios.q), space).eps_avg
    failed = []
    for i, (params, _) in enumerate(trained):
        if params is None:
            failed.append(i)
            continue
        for j, (net, tr) in enumerate(zip(nets, truths)):
            adapted = adapt_params(params, nets[i], net)
            v = oldf_voltages(net, adapted, tr.scenarios.p, tr.scenarios.q)
            matrix[i, j] = error_metrics(tr.v, v, space).eps_avg
    return TopologyResult(list(configs), matrix, baseline, failed, space)
