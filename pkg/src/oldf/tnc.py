"""Truncated Newton (Newton-CG) minimizer with a halving Wolfe line search.

Each outer iteration solves ``H d = -g`` approximately by conjugate gradients,
where the Hessian-vector products are forward differences of the analytic
gradient.  The preconditioner is the identity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps


@dataclass
class TncOptions:
    gtol: float = 1e-6
    max_iter: int = 100
    max_cg: int | None = None
    armijo: float = 1e-4
    curvature: float = 0.9
    max_halvings: int = 60
    check_gradient: bool = False


@dataclass
class StepRecord:
    f_old: float
    f_new: float
    beta: float
    slope: float  # g^T d at the start of the step
    wolfe: bool


@dataclass
class TncResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    f0: float
    iterations: int
    reason: str
    n_eval: int
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def grad_norm(self) -> float:
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0


class _Counted:
    def __init__(self, fg):
        self.fg = fg
        self.n = 0

    def __call__(self, x):
        self.n += 1
        f, g = self.fg(x)
        g = np.asarray(g, dtype=float)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("gradient has non-finite entries")
        return float(f), g


def check_gradient(fg, x: np.ndarray, h: float = 1e-6) -> float:
    """Max relative deviation between ``fg``'s gradient and central differences."""
    _, g = fg(x)
    fd = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        fd[i] = (fg(x + e)[0] - fg(x - e)[0]) / (2 * h)
    scale = max(np.max(np.abs(fd)), np.max(np.abs(g)), 1e-300)
    return float(np.max(np.abs(fd - g)) / scale)


def _cg_direction(fg, x, g, max_cg):
    """Approximate Newton direction by CG on H d = -g, stopping on negative curvature."""
    gnorm = np.linalg.norm(g)
    tol = min(0.5, np.sqrt(gnorm)) * gnorm
    z = np.zeros_like(g)
    r = g.copy()
    d = -r
    rr = r @ r
    xnorm = np.linalg.norm(x)
    for j in range(max_cg):
        dn = np.linalg.norm(d)
        delta = np.sqrt(EPS) * (1.0 + xnorm) / dn
        Hd = (fg(x + delta * d)[1] - g) / delta
        curv = d @ Hd
        if curv <= EPS * dn * dn:
            return -g if j == 0 else z
        alpha = rr / curv
        z = z + alpha * d
        r = r + alpha * Hd
        rr_new = r @ r
        if np.sqrt(rr_new) <= tol:
            break
        d = -r + (rr_new / rr) * d
        rr = rr_new
    return z


def tnc_minimize(
    fg: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    opts: TncOptions | None = None,
) -> TncResult:
    """Minimize a smooth function given ``fg(x) -> (f, grad)``.

    Stops when the infinity norm of the gradient is at most ``opts.gtol`` or
    after ``opts.max_iter`` outer iterations.  A step is accepted once it meets
    the Armijo and strong curvature conditions; if no halving meets both, the
    longest Armijo-satisfying step is taken instead.
    """
    opts = opts or TncOptions()
    fg = _Counted(fg)
    x = np.array(x0, dtype=float)
    if opts.check_gradient:
        err = check_gradient(fg, x)
        if err > 1e-4:
            raise ValueError(f"analytic gradient disagrees with finite differences (rel. err {err:.2e})")
    f, g = fg(x)
    f0 = f
    max_cg = opts.max_cg or max(1, min(50, x.size))
    steps: list[StepRecord] = []
    k = 0
    reason = "max_iter"
    while True:
        if np.max(np.abs(g), initial=0.0) <= opts.gtol:
            reason = "converged"
            break
        if k >= opts.max_iter:
            break
        d = _cg_direction(fg, x, g, max_cg)
        slope = g @ d
        if not slope < 0:
            d = -g
            slope = -(g @ g)
        beta = 1.0
        fallback = None
        accepted = None
        for _ in range(opts.max_halvings + 1):
            xt = x + beta * d
            ft, gt = fg(xt)
            armijo = ft <= f + opts.armijo * beta * slope
            if armijo and abs(gt @ d) <= opts.curvature * abs(slope):
                accepted = (xt, ft, gt, beta, True)
                break
            if armijo and fallback is None:
                fallback = (xt, ft, gt, beta, False)
            beta *= 0.5
        accepted = accepted or fallback
        if accepted is None:
            reason = "line search failed"
            break
        xt, ft, gt, beta, wolfe = accepted
        if ft >= f and np.array_equal(xt, x):
            reason = "no progress"
            break
        steps.append(StepRecord(f, ft, beta, float(slope), wolfe))
        x, f, g = xt, ft, gt
        k += 1
    log.debug("tnc: %s after %d iterations, f=%.3e, |g|=%.2e", reason, k, f, np.max(np.abs(g), initial=0.0))
    return TncResult(x, f, g, f0, k, reason, fg.n, steps)
