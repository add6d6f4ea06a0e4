"""Nonlinear power flow for radial feeders by backward/forward sweep.

Single-phase solves work directly on the branch-flow (DistFlow) variables
``v, P, Q, ell``; ``P_n``/``Q_n`` are the sending-end flows on the branch feeding
bus ``n`` so the power received at ``n`` is ``P_n - r_n ell_n``.  All solves are
vectorized over a batch of scenarios.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .network import PHASES, RadialNetwork, ThreePhaseNetwork

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200


class DivergenceError(ArithmeticError):
    def __init__(self, bus: int, msg: str = ""):
        self.bus = bus
        super().__init__(msg or f"sweep diverged: non-positive squared voltage at bus {bus}")


@dataclass
class PfSolution:
    """DistFlow solution; ``v`` is indexed by bus 1..n, flows by branch position."""

    v: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    ell: np.ndarray
    residual: float
    iterations: int
    converged: bool

    @property
    def vm(self) -> np.ndarray:
        return np.sqrt(self.v)


@dataclass
class BatchSolution:
    """Stacked DistFlow solutions, one row per scenario."""

    v: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    ell: np.ndarray
    residual: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    def __len__(self):
        return self.v.shape[0]

    def __getitem__(self, k: int) -> PfSolution:
        return PfSolution(
            self.v[k], self.P[k], self.Q[k], self.ell[k], float(self.residual[k]), int(self.iterations[k]), bool(self.converged[k])
        )


def distflow_residual(network: RadialNetwork, p, q, v, P, Q, ell) -> np.ndarray:
    """Max absolute violation of the DistFlow equations, per scenario.

    Checks power balance at every non-substation bus, the squared-voltage drop
    along every branch and the apparent-power identity, directly from the data.
    """
    p, q, v, P, Q, ell = (np.atleast_2d(a) for a in (p, q, v, P, Q, ell))
    net = network
    S = p.shape[0]
    r, x = net.r, net.x
    child = net.child_index
    # sum of sending-end flows on branches leaving each bus
    out_P = np.zeros((S, net.n))
    out_Q = np.zeros((S, net.n))
    par = np.array([b.parent - 1 for b in net.branches])
    internal = par >= 0
    np.add.at(out_P.T, par[internal], P.T[internal])
    np.add.at(out_Q.T, par[internal], Q.T[internal])
    bal_p = out_P[:, child] - p[:, child] - P + r * ell
    bal_q = out_Q[:, child] - q[:, child] - Q + x * ell
    vpar = np.where(internal, v[:, np.maximum(par, 0)], net.v0)
    drop = v[:, child] - (vpar - 2 * (r * P + x * Q) + (r**2 + x**2) * ell)
    app = vpar * ell - (P**2 + Q**2)
    stack = np.stack([bal_p, bal_q, drop, app])
    return np.abs(stack).max(axis=(0, 2))


def solve_distflow_batch(
    network: RadialNetwork,
    p: np.ndarray,
    q: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    v_init: np.ndarray | None = None,
) -> BatchSolution:
    """Solve DistFlow for each row of ``p``/``q`` (shape (S, n), per-unit injections).

    Scenarios whose sweep produces a non-positive squared voltage are frozen and
    reported as not converged.
    """
    net = network
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if p.shape != q.shape or p.shape[1] != net.n:
        raise ValueError(f"injections must have shape (S, {net.n}), got {p.shape} and {q.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise ValueError("injections must be finite")
    S = p.shape[0]
    T, Tt = net.path_matrix, net.path_matrix_t
    r, x = net.r[:, None], net.x[:, None]
    z2 = r**2 + x**2
    child = net.child_index
    par = np.array([b.parent - 1 for b in net.branches])
    internal = (par >= 0)[:, None]
    pT, qT = p.T, q.T

    v = np.full((net.n, S), net.v0) if v_init is None else np.array(np.atleast_2d(v_init).T, dtype=float)
    ell = np.zeros((net.n, S))
    P = np.zeros((net.n, S))
    Q = np.zeros((net.n, S))
    residual = np.full(S, np.inf)
    iters = np.zeros(S, dtype=int)
    active = np.ones(S, dtype=bool)
    failed = np.zeros(S, dtype=bool)

    def vpar_of(vv):
        return np.where(internal, vv[np.maximum(par, 0)], net.v0)

    for it in range(1, max_iter + 1):
        cols = np.flatnonzero(active)
        if cols.size == 0:
            break
        e = ell[:, cols]
        loss_p = np.zeros((net.n, cols.size))
        loss_q = np.zeros((net.n, cols.size))
        loss_p[child] = r * e
        loss_q[child] = x * e
        Pn = Tt @ (loss_p - pT[:, cols])
        Qn = Tt @ (loss_q - qT[:, cols])
        drop = 2 * (r * Pn + x * Qn) - z2 * e
        vn = net.v0 - T @ drop
        bad = ~np.all(vn > 0, axis=0) | ~np.all(np.isfinite(vn), axis=0)
        vp = vpar_of(vn)
        with np.errstate(divide="ignore", invalid="ignore"):
            en = (Pn**2 + Qn**2) / vp
        v[:, cols], P[:, cols], Q[:, cols], ell[:, cols] = vn, Pn, Qn, en
        iters[cols] = it
        good = cols[~bad]
        if good.size:
            residual[good] = distflow_residual(net, p[good], q[good], v[:, good].T, P[:, good].T, Q[:, good].T, ell[:, good].T)
        if bad.any():
            failed[cols[bad]] = True
            active[cols[bad]] = False
        active &= ~(residual <= tol)
    converged = (residual <= tol) & ~failed
    return BatchSolution(v.T.copy(), P.T.copy(), Q.T.copy(), ell.T.copy(), residual, iters, converged)


def solve_distflow(
    network: RadialNetwork,
    p: np.ndarray,
    q: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    v_init: np.ndarray | None = None,
) -> PfSolution:
    """Single-scenario DistFlow solve.

    Raises :class:`DivergenceError` naming the bus if a squared voltage turns
    non-positive; plain non-convergence is reported via ``converged=False``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    sol = solve_distflow_batch(network, p[None], q[None], tol, max_iter, None if v_init is None else np.asarray(v_init)[None])
    s = sol[0]
    if not s.converged and not np.all(s.v > 0):
        bad = int(np.flatnonzero(~(s.v > 0))[0]) + 1
        raise DivergenceError(bad)
    return s


# -- three-phase ---------------------------------------------------------------


@dataclass
class PfSolution3:
    """Unbalanced solution on the network's (bus, phase) pairs.

    ``V`` holds complex phasors per pair, ``vsq`` their squared magnitudes;
    ``S`` is the sending-end complex flow per (branch, phase) pair.
    """

    V: np.ndarray
    vsq: np.ndarray
    I: np.ndarray
    S: np.ndarray
    residual: float
    iterations: int
    converged: bool


@dataclass
class BatchSolution3:
    V: np.ndarray
    I: np.ndarray
    S: np.ndarray
    residual: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    @property
    def vsq(self) -> np.ndarray:
        return np.abs(self.V) ** 2

    def __len__(self):
        return self.V.shape[0]

    def __getitem__(self, k: int) -> PfSolution3:
        return PfSolution3(
            self.V[k], np.abs(self.V[k]) ** 2, self.I[k], self.S[k], float(self.residual[k]), int(self.iterations[k]), bool(self.converged[k])
        )


def _zblock(network: ThreePhaseNetwork) -> sp.csr_matrix:
    return sp.block_diag([b.z for b in network.skeleton_branches], format="csr")


def substation_phasors(network: ThreePhaseNetwork) -> np.ndarray:
    mag = np.sqrt(np.array(network.v0))
    ang = np.deg2rad(np.array(network.angles0))
    return mag * np.exp(1j * ang)


def solve_distflow3_batch(
    network: ThreePhaseNetwork,
    p: np.ndarray,
    q: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> BatchSolution3:
    """Backward current / forward voltage sweep with constant-power loads.

    ``p``/``q`` are net injections per (bus, phase) pair, shape (S, n_pairs).
    """
    net = network
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    m = net.n_pairs
    if p.shape != q.shape or p.shape[1] != m:
        raise ValueError(f"injections must have shape (S, {m}); phase-absent injections are not representable")
    S_cnt = p.shape[0]
    T, Tt, Z = net.path_matrix, net.path_matrix_t, _zblock(net)
    src = substation_phasors(net)
    V0 = np.array([src[PHASES.index(ph)] for _, ph in net.bus_pairs])[:, None]
    load = -(p + 1j * q).T  # constant-power demand
    V = np.repeat(V0, S_cnt, axis=1).astype(complex)
    I = np.zeros((m, S_cnt), dtype=complex)
    residual = np.full(S_cnt, np.inf)
    iters = np.zeros(S_cnt, dtype=int)
    failed = np.zeros(S_cnt, dtype=bool)
    for it in range(1, max_iter + 1):
        active = ~(residual < tol) & ~failed
        cols = np.flatnonzero(active)
        if cols.size == 0:
            break
        Vc = V[:, cols]
        i_load = np.conj(load[:, cols] / Vc)
        Ib = Tt @ i_load
        Vn = V0 - T @ (Z @ Ib)
        bad = ~np.all(np.isfinite(Vn), axis=0) | np.any(np.abs(Vn) < 1e-6, axis=0)
        residual[cols] = np.abs(Vn - Vc).max(axis=0)
        V[:, cols], I[:, cols] = Vn, Ib
        iters[cols] = it
        if bad.any():
            failed[cols[bad]] = True
    # sending-end complex power per (branch, phase)
    parent_pair = []
    for k, ph in net.branch_pairs:
        b = net.skeleton_branches[k]
        parent_pair.append(-1 if b.parent == 0 else net.pair_index[(b.parent, ph)])
    parent_pair = np.array(parent_pair)
    Vsrc_branch = np.array([src[PHASES.index(ph)] for _, ph in net.branch_pairs])[:, None]
    Vpar = np.where((parent_pair >= 0)[:, None], V[np.maximum(parent_pair, 0)], Vsrc_branch)
    Sflow = Vpar * np.conj(I)
    converged = (residual < tol) & ~failed
    return BatchSolution3(V.T.copy(), I.T.copy(), Sflow.T.copy(), residual, iters, converged)


def solve_distflow3(network: ThreePhaseNetwork, p, q, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> PfSolution3:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return solve_distflow3_batch(network, p[None], q[None], tol, max_iter)[0]


def solution_csv(sol: PfSolution, network: RadialNetwork, labels=None) -> str:
    """Per-branch CSV dump of a single-phase solution (for debugging)."""
    labels = labels or list(range(network.n + 1))
    lines = ["branch_id,from_bus,to_bus,v_to,vm_to,P,Q,ell"]
    for k, b in enumerate(network.branches):
        vk = sol.v[b.child - 1]
        lines.append(
            f"{b.id},{labels[b.parent]},{labels[b.child]},{float(vk)!r},{float(np.sqrt(vk))!r},{float(sol.P[k])!r},{float(sol.Q[k])!r},{float(sol.ell[k])!r}"
        )
    return "\n".join(lines) + "\n"
