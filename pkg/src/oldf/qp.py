"""Small dense convex QP solver by operator splitting (ADMM) with polishing.

Solves ``min 1/2 x'Px + q'x  s.t.  l <= Ax <= u``.  The iteration follows the
usual OSQP splitting: a linear solve with ``P + sigma I + A' diag(rho) A``,
a projection onto the box ``[l, u]`` and a dual update, with over-relaxation
and occasional step-size adaptation.  After the residuals drop below
tolerance, an active-set guess is read off the duals and the resulting
equality-constrained KKT system is solved exactly ("polishing").
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import nnls

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


@dataclass
class QpOptions:
    eps_abs: float = 1e-9
    eps_rel: float = 1e-9
    eps_infeas: float = 1e-5
    max_iter: int = 50000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adapt_every: int = 50
    check_every: int = 10
    polish_every: int = 50
    polish: bool = True
    feas_tol: float = 1e-9


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray  # duals of l <= Ax <= u: negative at an active lower bound, positive at an upper one
    status: str
    iterations: int
    prim_res: float
    dual_res: float
    polished: bool = False
    worst: int = -1  # index of the most violated row when infeasible


def _violation(Ax, l, u):
    return np.maximum(l - Ax, 0.0) + np.maximum(Ax - u, 0.0)


def _independent(rows: np.ndarray, order: np.ndarray, n: int) -> list[int]:
    """Greedily keep rows (in ``order``) that add rank, at most ``n`` of them."""
    keep: list[int] = []
    for i in order:
        trial = rows[keep + [i]]
        if np.linalg.matrix_rank(trial, tol=1e-10 * max(1.0, np.abs(trial).max())) == len(keep) + 1:
            keep.append(int(i))
            if len(keep) == n:
                break
    return keep


def _polish(P, q, A, l, u, x, z, y, tol):
    """Solve the KKT system on the active set suggested by (z, y); None unless it certifies."""
    n = len(x)
    lo = (z - l) < -y
    hi = (u - z) < y
    cand = np.flatnonzero(lo | hi)
    # with degenerate vertices more rows look active than there are variables
    keep = _independent(A, cand[np.argsort(-np.abs(y[cand]))], n) if len(cand) else []
    Aa = A[keep]
    b = np.where(lo, l, u)[keep]
    m = len(keep)
    K = np.zeros((n + m, n + m))
    K[:n, :n] = P
    K[:n, n:] = Aa.T
    K[n:, :n] = Aa
    rhs = np.concatenate([-q, b])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    xp = sol[:n]
    yp = np.zeros_like(y)
    yp[keep] = sol[n:]
    feas = _violation(A @ xp, l, u).max(initial=0.0)
    if feas > tol:
        return None
    # duals must push the right way: non-positive on lower bounds, non-negative on upper ones
    sgn = np.where(lo, -1.0, 1.0)
    if not np.all(sgn[keep] * yp[keep] >= -1e-12) and len(cand):
        w, _ = nnls(A[cand].T * sgn[cand][None, :], -(P @ xp + q))
        yp = np.zeros_like(y)
        yp[cand] = sgn[cand] * w
    stat = np.abs(P @ xp + q + A.T @ yp).max(initial=0.0)
    if stat <= 1e-9:
        return xp, yp
    return None


def solve_qp(P, q, A, l, u, opts: QpOptions | None = None, x0=None, y0=None) -> QpResult:
    opts = opts or QpOptions()
    P = np.atleast_2d(np.asarray(P, dtype=float))
    q = np.asarray(q, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = len(q), len(l)
    if np.any(l > u):
        k = int(np.argmax(l - u))
        return QpResult(np.zeros(n), np.zeros(m), INFEASIBLE, 0, np.inf, np.inf, worst=k)

    # Jacobi scaling of the variables and row equilibration of the constraints
    D = 1.0 / np.sqrt(np.maximum(np.diag(P), 1e-12))
    Ps, qs = P * np.outer(D, D), q * D
    AD = A * D[None, :]
    d = 1.0 / np.maximum(np.abs(AD).max(axis=1), 1e-12)
    As, ls, us = AD * d[:, None], l * d, u * d
    eq = np.abs(us - ls) < 1e-12
    rho0 = opts.rho

    def make(rho_s):
        rv = np.where(eq, 1e3 * rho_s, rho_s)
        K = Ps + opts.sigma * np.eye(n) + As.T @ (rv[:, None] * As)
        return rv, cho_factor(K)

    def try_polish(xs, zs, ys):
        if not opts.polish:
            return None
        return _polish(P, q, A, l, u, xs * D, zs / d, ys * d, opts.feas_tol)

    rv, fac = make(rho0)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float) / D
    z = np.clip(As @ x, ls, us)
    y = np.zeros(m) if y0 is None else np.array(y0, dtype=float) / d
    alpha = opts.alpha
    status, it = MAX_ITER, 0
    rp = rd = np.inf
    y_prev = y.copy()
    pol = None
    for it in range(1, opts.max_iter + 1):
        xt = cho_solve(fac, opts.sigma * x - qs + As.T @ (rv * z - y))
        zt = As @ xt
        x = alpha * xt + (1 - alpha) * x
        zr = alpha * zt + (1 - alpha) * z
        z_new = np.clip(zr + y / rv, ls, us)
        y = y + rv * (zr - z_new)
        z = z_new
        if it % opts.check_every:
            continue
        Ax = As @ x
        Px = Ps @ x
        Aty = As.T @ y
        rp = np.abs(Ax - z).max(initial=0.0)
        rd = np.abs(Px + qs + Aty).max(initial=0.0)
        ep = opts.eps_abs + opts.eps_rel * max(np.abs(Ax).max(initial=0.0), np.abs(z).max(initial=0.0))
        ed = opts.eps_abs + opts.eps_rel * max(np.abs(Px).max(initial=0.0), np.abs(Aty).max(initial=0.0), np.abs(qs).max(initial=0.0))
        if rp <= ep and rd <= ed:
            status = OPTIMAL
            break
        # an early active-set guess is often already right; accept it once the KKT conditions certify it
        if it % opts.polish_every == 0 and max(rp, rd) < 1e-4:
            pol = try_polish(x, z, y)
            if pol is not None:
                status = OPTIMAL
                break
        # primal infeasibility certificate from the change in duals
        dy = y - y_prev
        y_prev = y.copy()
        ndy = np.abs(dy).max(initial=0.0)
        if ndy > 0:
            pos, neg = dy > 0, dy < 0
            sup = np.sum(us[pos] * dy[pos]) + np.sum(ls[neg] * dy[neg])
            if np.abs(As.T @ dy).max() <= opts.eps_infeas * ndy and sup <= -opts.eps_infeas * ndy:
                status = INFEASIBLE
                break
        if it % opts.adapt_every == 0:
            num = rp / max(np.abs(Ax).max(initial=0.0), np.abs(z).max(initial=0.0), 1e-30)
            den = rd / max(np.abs(Px).max(initial=0.0), np.abs(Aty).max(initial=0.0), np.abs(qs).max(initial=0.0), 1e-30)
            if num > 0 and den > 0:
                new = float(np.clip(rho0 * np.sqrt(num / den), 1e-6, 1e6))
                if new > 5 * rho0 or new < rho0 / 5:
                    rho0 = new
                    rv, fac = make(rho0)
    x_out, y_out = x * D, y * d
    if status == INFEASIBLE:
        worst = int(np.argmax(_violation(A @ x_out, l, u)))
        return QpResult(x_out, y_out, status, it, rp, rd, worst=worst)
    if pol is None:
        pol = try_polish(x, z, y)
    polished = pol is not None
    if polished:
        x_out, y_out = pol
        status = OPTIMAL
    viol = _violation(A @ x_out, l, u)
    rd = float(np.abs(P @ x_out + q + A.T @ y_out).max(initial=0.0))
    return QpResult(x_out, y_out, status, it, float(viol.max(initial=0.0)), rd, polished, int(np.argmax(viol)) if m else -1)
