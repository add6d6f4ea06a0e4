"""LinDistFlow, its parameterized (optimized) form, and LinDist3Flow.

All evaluators take injections with scenarios on the leading axis: ``p`` is
``(n,)`` or ``(S, n)`` and the result has the same leading shape.  Products
with ``A^-1`` and ``A^-T`` go through the network's sparse path matrix, so no
inverse is ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import PHASES, RadialNetwork, ThreePhaseNetwork

SQRT3 = np.sqrt(3.0)


@dataclass(frozen=True, eq=False)
class LdfParams:
    """Coefficient diagonals (per branch) and bias vectors (per bus)."""

    dr: np.ndarray
    dx: np.ndarray
    gamma: np.ndarray
    rho: np.ndarray
    varrho: np.ndarray
    branch_ids: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("dr", "dx", "gamma", "rho", "varrho"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "branch_ids", tuple(self.branch_ids))

    def check(self, network: RadialNetwork) -> None:
        n = network.n
        for name in ("dr", "dx", "gamma", "rho", "varrho"):
            a = getattr(self, name)
            if a.shape != (n,):
                raise ValueError(f"{name} has shape {a.shape}, network needs ({n},)")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} has non-finite entries")
        if self.branch_ids and self.branch_ids != network.branch_ids:
            raise ValueError("parameters are keyed to a different branch ordering")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.dr, self.dx, self.gamma, self.rho, self.varrho])

    @classmethod
    def from_vector(cls, x: np.ndarray, n: int, branch_ids=()) -> "LdfParams":
        x = np.asarray(x, dtype=float)
        return cls(*(x[k * n : (k + 1) * n] for k in range(5)), branch_ids=branch_ids)

    def __eq__(self, other):
        if not isinstance(other, LdfParams):
            return NotImplemented
        return self.branch_ids == other.branch_ids and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("dr", "dx", "gamma", "rho", "varrho")
        )


def nominal_params(network: RadialNetwork) -> LdfParams:
    z = np.zeros(network.n)
    return LdfParams(network.r.copy(), network.x.copy(), z, z, z, network.branch_ids)


def _lead(a) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=float)
    return np.atleast_2d(a), a.ndim == 1


def oldf_voltages(network: RadialNetwork, params: LdfParams, p, q) -> np.ndarray:
    """Squared voltages of the parameterized model at buses 1..n."""
    params.check(network)
    p2, single = _lead(p)
    q2, _ = _lead(q)
    T, Tt = network.path_matrix, network.path_matrix_t
    # A^-1 D A^-T y = T D T^T y because A^-1 = -T
    fp = Tt @ (p2 + params.rho).T
    fq = Tt @ (q2 + params.varrho).T
    v = network.v0 + 2 * (T @ (params.dr[:, None] * fp + params.dx[:, None] * fq)) + params.gamma[:, None]
    v = v.T
    return v[0] if single else v


def ldf_voltages(network: RadialNetwork, p, q) -> np.ndarray:
    """Traditional LinDistFlow squared voltages at buses 1..n."""
    p2, single = _lead(p)
    q2, _ = _lead(q)
    T, Tt = network.path_matrix, network.path_matrix_t
    y = network.r[:, None] * (Tt @ p2.T) + network.x[:, None] * (Tt @ q2.T)
    v = (network.v0 + 2 * (T @ y)).T
    return v[0] if single else v


def ldf_flows(network: RadialNetwork, p, q) -> tuple[np.ndarray, np.ndarray]:
    """Lossless branch flows P = A^-T p, Q = A^-T q (positive toward the child)."""
    p2, single = _lead(p)
    q2, _ = _lead(q)
    P = network.inv_t(p2.T).T
    Q = network.inv_t(q2.T).T
    return (P[0], Q[0]) if single else (P, Q)


def voltage_sensitivity(network: RadialNetwork, dr: np.ndarray, dx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dense dv/dp = 2 A^-1 D_r A^-T and dv/dq for given coefficient diagonals."""
    T = network.path_matrix.toarray()
    return 2 * (T * dr) @ T.T, 2 * (T * dx) @ T.T


# -- three-phase ---------------------------------------------------------------


def h_blocks(z: np.ndarray, phases: str) -> tuple[np.ndarray, np.ndarray]:
    """Nominal LinDist3Flow blocks for one branch's phase-restricted impedance.

    Cross terms follow the fixed 120-degree phasor-ratio assumption; the sign
    of each sqrt(3) term depends on whether the column phase lags or leads.
    """
    r, x = z.real, z.imag
    k = len(phases)
    hp = np.zeros((k, k))
    hq = np.zeros((k, k))
    for i, a in enumerate(phases):
        for j, b in enumerate(phases):
            if i == j:
                hp[i, j] = -2 * r[i, j]
                hq[i, j] = -2 * x[i, j]
                continue
            # +1 when the column phase is the next one in abc rotation (ab, bc, ca)
            s = 1.0 if (PHASES.index(b) - PHASES.index(a)) % 3 == 1 else -1.0
            hp[i, j] = r[i, j] - s * SQRT3 * x[i, j]
            hq[i, j] = x[i, j] + s * SQRT3 * r[i, j]
    return hp, hq


@dataclass(frozen=True, eq=False)
class Ldf3Params:
    """Per-branch H blocks (ordered like ``network.skeleton_branches``) and biases per (bus, phase)."""

    hp: tuple[np.ndarray, ...]
    hq: tuple[np.ndarray, ...]
    gamma: np.ndarray
    rho: np.ndarray
    varrho: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "hp", tuple(np.array(h, dtype=float) for h in self.hp))
        object.__setattr__(self, "hq", tuple(np.array(h, dtype=float) for h in self.hq))
        for name in ("gamma", "rho", "varrho"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))

    def check(self, network: ThreePhaseNetwork) -> None:
        skel = network.skeleton_branches
        if len(self.hp) != len(skel) or len(self.hq) != len(skel):
            raise ValueError("one H block pair per branch is required")
        for b, hp, hq in zip(skel, self.hp, self.hq):
            k = len(b.phases)
            if hp.shape != (k, k) or hq.shape != (k, k):
                raise ValueError(f"branch {b.id}: H blocks must be {k}x{k} for phases {b.phases}")
        m = network.n_pairs
        for name in ("gamma", "rho", "varrho"):
            if getattr(self, name).shape != (m,):
                raise ValueError(f"{name} must have length {m}")
        if not all(np.all(np.isfinite(a)) for a in self.hp + self.hq + (self.gamma, self.rho, self.varrho)):
            raise ValueError("non-finite parameters")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([h.ravel() for h in self.hp] + [h.ravel() for h in self.hq] + [self.gamma, self.rho, self.varrho])

    @classmethod
    def from_vector(cls, x: np.ndarray, network: ThreePhaseNetwork) -> "Ldf3Params":
        sizes = [len(b.phases) for b in network.skeleton_branches]
        out, k = [], 0
        for _ in range(2):
            blocks = []
            for s in sizes:
                blocks.append(np.asarray(x[k : k + s * s]).reshape(s, s))
                k += s * s
            out.append(tuple(blocks))
        m = network.n_pairs
        g, r, v = (x[k + i * m : k + (i + 1) * m] for i in range(3))
        return cls(out[0], out[1], g, r, v)

    def __eq__(self, other):
        if not isinstance(other, Ldf3Params):
            return NotImplemented
        return np.array_equal(self.to_vector(), other.to_vector()) and len(self.hp) == len(other.hp)


def nominal_h_blocks(network: ThreePhaseNetwork) -> Ldf3Params:
    hp, hq = zip(*(h_blocks(b.z, b.phases) for b in network.skeleton_branches))
    z = np.zeros(network.n_pairs)
    return Ldf3Params(hp, hq, z, z, z)


def _bdiag(blocks) -> "np.ndarray":
    import scipy.sparse as sp

    return sp.block_diag(blocks, format="csr")


def ldf3_voltages(network: ThreePhaseNetwork, params: Ldf3Params, p, q) -> np.ndarray:
    """LinDist3Flow squared voltages per (bus, phase) pair.

    ``p``/``q`` are net injections; the H-block formula acts on demand
    (``-p``), which is how the blocks' signs are defined.
    """
    params.check(network)
    p2, single = _lead(p)
    q2, _ = _lead(q)
    if p2.shape[1] != network.n_pairs:
        raise ValueError(f"injections must have {network.n_pairs} (bus, phase) entries")
    T, Tt = network.path_matrix, network.path_matrix_t
    fp = Tt @ (-p2 + params.rho).T
    fq = Tt @ (-q2 + params.varrho).T
    y = _bdiag(params.hp) @ fp + _bdiag(params.hq) @ fq
    v = network.v0_pairs()[:, None] + T @ y + params.gamma[:, None]
    v = v.T
    return v[0] if single else v


def phase_scenario(network: ThreePhaseNetwork, loads: dict[int, dict[str, complex]]) -> tuple[np.ndarray, np.ndarray]:
    """Build pair-indexed injection vectors from {bus: {phase: injection}}.

    Rejects injections on phases absent at the bus.
    """
    p = np.zeros(network.n_pairs)
    q = np.zeros(network.n_pairs)
    for bus, per in loads.items():
        for ph, s in per.items():
            key = (bus, ph)
            if key not in network.pair_index:
                raise ValueError(f"bus {bus} has no phase {ph!r}")
            p[network.pair_index[key]] = complex(s).real
            q[network.pair_index[key]] = complex(s).imag
    return p, q
