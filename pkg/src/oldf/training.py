"""Offline training: scenario sampling, the mean-square voltage loss, its
analytic gradients, and the driver that fits parameters with truncated Newton.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .distflow import solve_distflow3_batch, solve_distflow_batch
from .lindistflow import Ldf3Params, LdfParams, _bdiag, nominal_h_blocks, nominal_params
from .network import RadialNetwork, ThreePhaseNetwork
from .tnc import TncOptions, tnc_minimize

log = logging.getLogger(__name__)

TRAIN_STD = 0.35
TRAIN_COUNT = 20


@dataclass
class ScenarioSet:
    """Net injections, one scenario per row (per bus, or per bus-phase pair)."""

    p: np.ndarray
    q: np.ndarray
    provenance: str = "file"
    seed: int | None = None

    def __post_init__(self):
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float))
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float))
        if self.p.shape != self.q.shape:
            raise ValueError("p and q must have the same shape")
        if len(self.p) < 1:
            raise ValueError("a scenario set needs at least one scenario")

    def __len__(self):
        return self.p.shape[0]

    def subset(self, mask) -> "ScenarioSet":
        return ScenarioSet(self.p[mask], self.q[mask], self.provenance, self.seed)


def sample_training_scenarios(p0, q0, count: int = TRAIN_COUNT, seed: int = 0, std: float = TRAIN_STD) -> ScenarioSet:
    """Scale each bus's base injection by an independent Normal(1, std) draw."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    f = rng.normal(1.0, std, size=(count, len(p0)))
    return ScenarioSet(f * p0, f * q0, "base-scaled-normal", seed)


def highload_factors() -> np.ndarray:
    """The 30 uniform scaling factors: 15 across [-2, -1] and 15 across [1, 2] in steps of 1/14."""
    up = 1.0 + np.arange(15) / 14.0
    return np.concatenate([-up[::-1], up])


def sample_highload_scenarios(p0, q0) -> ScenarioSet:
    f = highload_factors()[:, None]
    return ScenarioSet(f * p0, f * q0, "high-load-grid", None)


def sample_uniform_scenarios(p0, q0, count: int, lo: float = 0.0, hi: float = 1.5, seed: int = 0) -> ScenarioSet:
    if lo > hi:
        raise ValueError("lo must not exceed hi")
    rng = np.random.default_rng(seed)
    f = rng.uniform(lo, hi, size=(count, len(p0)))
    return ScenarioSet(f * p0, f * q0, "uniform-random", seed)


def base_scenario(p0, q0) -> ScenarioSet:
    return ScenarioSet(np.asarray(p0)[None], np.asarray(q0)[None], "base", None)


# -- ground truth --------------------------------------------------------------


@dataclass
class Truth:
    """DistFlow squared voltages for the converged subset of a scenario set."""

    scenarios: ScenarioSet
    v: np.ndarray
    mask: np.ndarray

    @property
    def dropped(self) -> int:
        return int((~self.mask).sum())


def solve_truth(network, scenarios: ScenarioSet, **opts) -> Truth:
    if isinstance(network, ThreePhaseNetwork):
        sol = solve_distflow3_batch(network, scenarios.p, scenarios.q, **opts)
        v = sol.vsq
    else:
        sol = solve_distflow_batch(network, scenarios.p, scenarios.q, **opts)
        v = sol.v
    mask = sol.converged
    if not mask.all():
        log.warning("dropping %d of %d scenarios whose DistFlow solve did not converge", (~mask).sum(), len(mask))
    if not mask.any():
        raise RuntimeError("DistFlow did not converge on any scenario")
    return Truth(scenarios.subset(mask), v[mask], mask)


# -- single-phase loss ---------------------------------------------------------


def _residuals(network: RadialNetwork, params: LdfParams, P: np.ndarray, Q: np.ndarray, v_df: np.ndarray):
    T, Tt = network.path_matrix, network.path_matrix_t
    fp = Tt @ (P + params.rho).T
    fq = Tt @ (Q + params.varrho).T
    v = network.v0 + 2 * (T @ (params.dr[:, None] * fp + params.dx[:, None] * fq)) + params.gamma[:, None]
    return v - v_df.T, fp, fq


def loss(network: RadialNetwork, params: LdfParams, scenarios: ScenarioSet, v_df: np.ndarray) -> float:
    """Mean over scenarios and buses of the squared voltage residual."""
    v_df = np.atleast_2d(v_df)
    if len(v_df) == 0:
        raise ValueError("no scenarios left to evaluate")
    e, _, _ = _residuals(network, params, scenarios.p, scenarios.q, v_df)
    return float(np.sum(e * e) / e.size)


def loss_and_gradients(network: RadialNetwork, params: LdfParams, scenarios: ScenarioSet, v_df: np.ndarray):
    """Loss and gradient ordered as [dr, dx, gamma, rho, varrho]."""
    v_df = np.atleast_2d(v_df)
    if len(v_df) == 0:
        raise ValueError("no scenarios left to evaluate")
    T, Tt = network.path_matrix, network.path_matrix_t
    e, fp, fq = _residuals(network, params, scenarios.p, scenarios.q, v_df)
    c = 2.0 / e.size
    u = Tt @ e  # A^-T applied to residuals, up to sign (cancels in products)
    g_dr = 2 * c * np.sum(u * fp, axis=1)
    g_dx = 2 * c * np.sum(u * fq, axis=1)
    g_gamma = c * e.sum(axis=1)
    g_rho = 2 * c * (T @ (params.dr * u.sum(axis=1)))
    g_varrho = 2 * c * (T @ (params.dx * u.sum(axis=1)))
    return float(np.sum(e * e) / e.size), np.concatenate([g_dr, g_dx, g_gamma, g_rho, g_varrho])


def loss_gradients(network, params, scenarios, v_df) -> np.ndarray:
    return loss_and_gradients(network, params, scenarios, v_df)[1]


# -- three-phase loss ----------------------------------------------------------


def _residuals3(network: ThreePhaseNetwork, params: Ldf3Params, P, Q, v_df):
    T, Tt = network.path_matrix, network.path_matrix_t
    fp = Tt @ (-P + params.rho).T
    fq = Tt @ (-Q + params.varrho).T
    Hp, Hq = _bdiag(params.hp), _bdiag(params.hq)
    v = network.v0_pairs()[:, None] + T @ (Hp @ fp + Hq @ fq) + params.gamma[:, None]
    return v - v_df.T, fp, fq, Hp, Hq


def loss3(network: ThreePhaseNetwork, params: Ldf3Params, scenarios: ScenarioSet, v_df) -> float:
    """Squared residual averaged over scenarios and present (bus, phase) pairs."""
    v_df = np.atleast_2d(v_df)
    if len(v_df) == 0:
        raise ValueError("no scenarios left to evaluate")
    e = _residuals3(network, params, scenarios.p, scenarios.q, v_df)[0]
    return float(np.sum(e * e) / e.size)


def loss3_and_gradients(network: ThreePhaseNetwork, params: Ldf3Params, scenarios: ScenarioSet, v_df):
    """Loss and gradient ordered as [H^P blocks, H^Q blocks, gamma, rho, varrho]."""
    v_df = np.atleast_2d(v_df)
    if len(v_df) == 0:
        raise ValueError("no scenarios left to evaluate")
    T, Tt = network.path_matrix, network.path_matrix_t
    e, fp, fq, Hp, Hq = _residuals3(network, params, scenarios.p, scenarios.q, v_df)
    c = 2.0 / e.size
    u = Tt @ e
    off = network.branch_offsets
    gp, gq = [], []
    for k in range(len(params.hp)):
        sl = slice(off[k], off[k + 1])
        # dV/dH_k[i, j] = T[:, (k,i)] * (T^T (D + rho))[(k,j)]
        gp.append(c * (u[sl] @ fp[sl].T).ravel())
        gq.append(c * (u[sl] @ fq[sl].T).ravel())
    usum = u.sum(axis=1)
    g_gamma = c * e.sum(axis=1)
    g_rho = c * (T @ (Hp.T @ usum))
    g_varrho = c * (T @ (Hq.T @ usum))
    g = np.concatenate(gp + gq + [g_gamma, g_rho, g_varrho])
    return float(np.sum(e * e) / e.size), g


def loss3_gradients(network, params, scenarios, v_df) -> np.ndarray:
    return loss3_and_gradients(network, params, scenarios, v_df)[1]


# -- training driver -----------------------------------------------------------


@dataclass
class TrainReport:
    initial_loss: float
    final_loss: float
    iterations: int
    grad_norm: float
    wall_time: float
    dropped: int
    exit_reason: str
    n_scenarios: int = 0
    seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainOptions:
    tol: float = 1e-6
    max_iter: int = 100
    tnc: TncOptions = field(default_factory=TncOptions)


def train(network, scenarios: ScenarioSet, opts: TrainOptions | None = None, truth: Truth | None = None):
    """Fit LinDistFlow (or LinDist3Flow) parameters to DistFlow voltages.

    Starts from the nominal parameters and minimizes the loss with
    :func:`~oldf.tnc.tnc_minimize`.  Returns ``(params, report)``.
    """
    opts = opts or TrainOptions()
    t0 = time.perf_counter()
    truth = truth or solve_truth(network, scenarios)
    sc, vdf = truth.scenarios, truth.v
    if isinstance(network, ThreePhaseNetwork):
        p0 = nominal_h_blocks(network)

        def unpack(x):
            return Ldf3Params.from_vector(x, network)

        def fg(x):
            return loss3_and_gradients(network, unpack(x), sc, vdf)

    else:
        p0 = nominal_params(network)
        ids = network.branch_ids

        def unpack(x):
            return LdfParams.from_vector(x, network.n, ids)

        def fg(x):
            return loss_and_gradients(network, unpack(x), sc, vdf)

    tnc_opts = TncOptions(**{**asdict(opts.tnc), "gtol": opts.tol, "max_iter": opts.max_iter})
    res = tnc_minimize(fg, p0.to_vector(), tnc_opts)
    report = TrainReport(
        res.f0,
        res.fun,
        res.iterations,
        res.grad_norm,
        time.perf_counter() - t0,
        truth.dropped,
        res.reason,
        len(sc),
        scenarios.seed,
    )
    log.info("trained: loss %.3e -> %.3e in %d iterations (%s)", res.f0, res.fun, res.iterations, res.reason)
    return unpack(res.x), report


def parameter_dump(network: RadialNetwork, params: LdfParams) -> str:
    """CSV of nominal vs optimized coefficients per branch and biases per bus."""
    lines = ["kind,id,nominal,optimized"]
    for bid, r, d in zip(network.branch_ids, network.r, params.dr):
        lines.append(f"dr,{bid},{float(r)!r},{float(d)!r}")
    for bid, x, d in zip(network.branch_ids, network.x, params.dx):
        lines.append(f"dx,{bid},{float(x)!r},{float(d)!r}")
    for name in ("gamma", "rho", "varrho"):
        for bus, val in enumerate(getattr(params, name), start=1):
            lines.append(f"{name},{bus},0.0,{float(val)!r}")
    return "\n".join(lines) + "\n"
