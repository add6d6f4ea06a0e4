"""Radial feeder models, incidence algebra and switch reconfiguration.

Buses are integers ``0..n`` with the substation at bus 0.  Every closed branch
feeds exactly one non-substation bus (its *child*); branch ids are stable labels
that survive reorientation after a topology change.
"""

from __future__ import annotations

import itertools
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

PHASES = "abc"


class NetworkError(ValueError):
    """Raised when a network is structurally invalid for the requested operation."""


@dataclass(frozen=True)
class Branch:
    id: int
    parent: int
    child: int
    r: float
    x: float

    def flipped(self) -> "Branch":
        return replace(self, parent=self.child, child=self.parent)


@dataclass(frozen=True)
class RadialDiagnostic:
    ok: bool
    cycle: tuple[int, ...] = ()
    disconnected: tuple[int, ...] = ()
    multi_parent: tuple[int, ...] = ()
    warnings: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.ok

    def message(self) -> str:
        if self.ok:
            return "radial"
        parts = []
        if self.cycle:
            parts.append(f"cycle through buses {sorted(self.cycle)}")
        if self.disconnected:
            parts.append(f"disconnected buses {sorted(self.disconnected)}")
        if self.multi_parent:
            parts.append(f"buses with several parents {sorted(self.multi_parent)}")
        return "; ".join(parts) or "not radial"


def _tree_check(n_buses: int, edges: Iterable[tuple[int, int]]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Return (cycle buses, unreachable buses) of an undirected edge list rooted at 0."""
    adj: list[list[int]] = [[] for _ in range(n_buses)]
    for eid, (a, b) in enumerate(edges):
        adj[a].append((b, eid))
        adj[b].append((a, eid))
    seen = [False] * n_buses
    via = [-1] * n_buses
    up = [-1] * n_buses
    cycle: set[int] = set()
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for w, eid in adj[u]:
            if eid == via[u]:
                continue
            if seen[w]:
                if not cycle:
                    # walk both endpoints up to their common ancestor
                    pa, a = [], u
                    while a != -1:
                        pa.append(a)
                        a = up[a]
                    pb, b = [], w
                    while b not in pa:
                        pb.append(b)
                        b = up[b]
                    cycle.update(pa[: pa.index(b) + 1])
                    cycle.update(pb)
                continue
            seen[w] = True
            via[w] = eid
            up[w] = u
            stack.append(w)
    missing = tuple(i for i in range(n_buses) if not seen[i])
    return tuple(sorted(cycle)), missing


@dataclass(frozen=True)
class RadialNetwork:
    """Single-phase-equivalent radial feeder.

    ``branches`` holds the closed (in-service) branches, ``open_branches`` the
    open ones (tie lines).  ``v0`` is the *squared* substation voltage magnitude.
    """

    n: int
    branches: tuple[Branch, ...]
    v0: float = 1.0
    open_branches: tuple[Branch, ...] = ()
    switchable_ids: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "open_branches", tuple(self.open_branches))
        object.__setattr__(self, "switchable_ids", frozenset(self.switchable_ids))
        if self.n < 1:
            raise NetworkError("a feeder needs at least one non-substation bus")
        if not self.v0 > 0:
            raise NetworkError(f"v0 must be positive, got {self.v0}")
        ids = [b.id for b in self.all_branches]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate branch ids")
        for b in self.all_branches:
            for bus in (b.parent, b.child):
                if not 0 <= bus <= self.n:
                    raise NetworkError(f"branch {b.id} references bus {bus} outside 0..{self.n}")
            if b.parent == b.child:
                raise NetworkError(f"branch {b.id} is a self loop at bus {b.parent}")
            if b.r < 0 or b.x < 0:
                raise NetworkError(f"branch {b.id} has negative impedance r={b.r}, x={b.x}")
        unknown = self.switchable_ids - set(ids)
        if unknown:
            raise NetworkError(f"switchable ids {sorted(unknown)} are not branches")

    @property
    def n_buses(self) -> int:
        return self.n + 1

    @property
    def all_branches(self) -> tuple[Branch, ...]:
        return self.branches + self.open_branches

    def branch_by_id(self, bid: int) -> Branch:
        for b in self.all_branches:
            if b.id == bid:
                return b
        raise KeyError(bid)

    @cached_property
    def diagnostic(self) -> RadialDiagnostic:
        return validate_radial(self)

    def _require_radial(self):
        d = self.diagnostic
        if not d.ok:
            raise NetworkError(f"network is not radial: {d.message()}")

    # -- derived arrays, indexed by branch position in ``branches`` ---------
    @cached_property
    def feeder(self) -> np.ndarray:
        """feeder[bus] = position of the branch feeding ``bus`` (-1 for bus 0)."""
        self._require_radial()
        f = np.full(self.n_buses, -1, dtype=int)
        for k, b in enumerate(self.branches):
            f[b.child] = k
        return f

    @cached_property
    def parent(self) -> np.ndarray:
        self._require_radial()
        p = np.full(self.n_buses, -1, dtype=int)
        for b in self.branches:
            p[b.child] = b.parent
        return p

    @cached_property
    def order(self) -> np.ndarray:
        """Non-substation buses in breadth-first order from the substation."""
        self._require_radial()
        children: list[list[int]] = [[] for _ in range(self.n_buses)]
        for b in self.branches:
            children[b.parent].append(b.child)
        out, queue = [], deque([0])
        while queue:
            u = queue.popleft()
            for c in sorted(children[u]):
                out.append(c)
                queue.append(c)
        return np.array(out, dtype=int)

    @cached_property
    def r(self) -> np.ndarray:
        return np.array([b.r for b in self.branches], dtype=float)

    @cached_property
    def x(self) -> np.ndarray:
        return np.array([b.x for b in self.branches], dtype=float)

    @cached_property
    def branch_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.branches)

    @cached_property
    def paths(self) -> dict[int, list[int]]:
        return branch_paths(self)

    @cached_property
    def path_matrix(self) -> sp.csr_matrix:
        """T[bus-1, k] = 1 iff branch ``k`` lies on the substation->bus path.

        With the incidence convention of :func:`incidence`, ``A^-1 = -T``.
        """
        rows, cols = [], []
        for bus in range(1, self.n_buses):
            for bid in self.paths[bus]:
                rows.append(bus - 1)
                cols.append(self._pos[bid])
        data = np.ones(len(rows))
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

    @cached_property
    def path_matrix_t(self) -> sp.csr_matrix:
        return self.path_matrix.T.tocsr()

    @cached_property
    def _pos(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.branches)}

    @cached_property
    def root_branches(self) -> np.ndarray:
        return np.array([k for k, b in enumerate(self.branches) if b.parent == 0], dtype=int)

    @cached_property
    def child_index(self) -> np.ndarray:
        """child_index[k] = child bus of branch k minus one (its column in A)."""
        return np.array([b.child - 1 for b in self.branches], dtype=int)

    # -- matrix-free incidence products (operate on leading axis) -----------
    def inv_t(self, y: np.ndarray) -> np.ndarray:
        """A^-T y for bus-indexed ``y`` (shape (n,) or (n, S)); result is branch-indexed."""
        return -(self.path_matrix_t @ y)

    def inv(self, w: np.ndarray) -> np.ndarray:
        """A^-1 w for branch-indexed ``w``; result is bus-indexed."""
        return -(self.path_matrix @ w)

    def downstream(self, bid: int) -> set[int]:
        return {bus for bus, path in self.paths.items() if bid in path}

    def fingerprint_payload(self) -> dict:
        closed = sorted(
            (b.id, min(b.parent, b.child), max(b.parent, b.child), float(b.r).hex(), float(b.x).hex())
            for b in self.branches
        )
        return {"kind": "1ph", "n": self.n, "v0": float(self.v0).hex(), "branches": closed}


def validate_radial(network: RadialNetwork) -> RadialDiagnostic:
    """Check that the closed branches form a spanning tree rooted at bus 0.

    Orientation is checked too: each non-substation bus must be the child of
    exactly one closed branch and the substation of none.
    """
    warns = tuple(f"branch {b.id} has zero impedance" for b in network.branches if b.r == 0 and b.x == 0)
    for w in warns:
        log.warning(w)
    cycle, missing = _tree_check(network.n_buses, [(b.parent, b.child) for b in network.branches])
    counts = np.zeros(network.n_buses, dtype=int)
    for b in network.branches:
        counts[b.child] += 1
    multi = tuple(int(i) for i in np.flatnonzero(counts > 1))
    if counts[0]:
        multi = (0,) + multi
    ok = not cycle and not missing and not multi and len(network.branches) == network.n
    return RadialDiagnostic(ok, cycle, missing, multi, warns)


def branch_paths(network: RadialNetwork) -> dict[int, list[int]]:
    """Ordered list of branch ids from the substation to each bus."""
    network._require_radial()
    feeder_id = {b.child: b for b in network.branches}
    paths: dict[int, list[int]] = {0: []}
    for bus in network.order:
        b = feeder_id[int(bus)]
        paths[int(bus)] = paths[b.parent] + [b.id]
    return paths


def incidence(network: RadialNetwork) -> tuple[np.ndarray, np.ndarray]:
    """Reduced incidence A (branch x non-substation bus) and substation column a0.

    Convention: A[b, child] = -1, A[b, parent] = +1; a0[b] = 1 iff parent is bus 0.
    """
    network._require_radial()
    A = np.zeros((network.n, network.n))
    a0 = np.zeros(network.n)
    for k, b in enumerate(network.branches):
        A[k, b.child - 1] = -1.0
        if b.parent == 0:
            a0[k] = 1.0
        else:
            A[k, b.parent - 1] = 1.0
    return A, a0


def orient(n: int, edges: Iterable[Branch]) -> tuple[Branch, ...]:
    """Re-root an undirected branch set at bus 0 (parent = endpoint nearer the root)."""
    edges = list(edges)
    cycle, missing = _tree_check(n + 1, [(b.parent, b.child) for b in edges])
    if cycle or missing or len(edges) != n:
        parts = []
        if cycle:
            parts.append(f"cycle through buses {list(cycle)}")
        if missing:
            parts.append(f"islanded buses {list(missing)}")
        if not parts:
            parts.append(f"{len(edges)} branches for {n} non-substation buses")
        raise NetworkError("configuration is not radial: " + "; ".join(parts))
    adj: list[list[Branch]] = [[] for _ in range(n + 1)]
    for b in edges:
        adj[b.parent].append(b)
        adj[b.child].append(b)
    out: list[Branch] = []
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for b in sorted(adj[u], key=lambda e: e.id):
            w = b.child if b.parent == u else b.parent
            if w in seen:
                continue
            seen.add(w)
            out.append(b if b.parent == u else b.flipped())
            queue.append(w)
    pos = {b.id: k for k, b in enumerate(edges)}
    return tuple(sorted(out, key=lambda b: pos[b.id]))


@dataclass(frozen=True)
class TopologyConfig:
    """Switch actions relative to a base feeder: branches to open and to close."""

    open_ids: frozenset[int] = frozenset()
    closed_ids: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "open_ids", frozenset(self.open_ids))
        object.__setattr__(self, "closed_ids", frozenset(self.closed_ids))
        both = self.open_ids & self.closed_ids
        if both:
            raise NetworkError(f"branches {sorted(both)} are both opened and closed")

    def inverse(self) -> "TopologyConfig":
        return TopologyConfig(self.closed_ids, self.open_ids)

    def label(self) -> str:
        if not self.open_ids and not self.closed_ids:
            return "base"
        o = ",".join(map(str, sorted(self.open_ids)))
        c = ",".join(map(str, sorted(self.closed_ids)))
        return f"open({o})/close({c})"


def apply_topology(base: RadialNetwork, cfg: TopologyConfig) -> RadialNetwork:
    """Open/close switchable branches and re-root the resulting tree at bus 0."""
    bad = (cfg.open_ids | cfg.closed_ids) - base.switchable_ids
    if bad:
        raise NetworkError(f"branches {sorted(bad)} are not switchable")
    closed = [b for b in base.branches if b.id not in cfg.open_ids]
    closed += [b for b in base.open_branches if b.id in cfg.closed_ids]
    opened = [b for b in base.open_branches if b.id not in cfg.closed_ids]
    opened += [b for b in base.branches if b.id in cfg.open_ids]
    oriented = orient(base.n, closed)
    return replace(base, branches=oriented, open_branches=tuple(sorted(opened, key=lambda b: b.id)))


def enumerate_topologies(base: RadialNetwork, n_open: int | None = None) -> list[TopologyConfig]:
    """All radial configurations reachable by toggling the switchable branches.

    ``n_open`` fixes how many switchable branches are open; it defaults to the
    base count, which is what keeps the closed set at ``n`` branches.
    """
    sw = sorted(base.switchable_ids)
    base_open = {b.id for b in base.open_branches} & set(sw)
    if n_open is None:
        n_open = len(base_open)
    configs = []
    for open_set in itertools.combinations(sw, n_open):
        open_set = set(open_set)
        cfg = TopologyConfig(
            open_ids=frozenset(open_set - base_open),
            closed_ids=frozenset(base_open - open_set),
        )
        try:
            apply_topology(base, cfg)
        except NetworkError:
            continue
        configs.append(cfg)
    # base first, then by number of switch actions, then lexicographic
    configs.sort(key=lambda c: (len(c.open_ids), sorted(c.open_ids), sorted(c.closed_ids)))
    return configs


# -- three-phase ---------------------------------------------------------------


@dataclass(frozen=True)
class Branch3:
    """Three-phase branch; ``z`` is the phase-restricted complex impedance block."""

    id: int
    parent: int
    child: int
    phases: str
    z: np.ndarray

    def __post_init__(self):
        z = np.array(self.z, dtype=complex)
        k = len(self.phases)
        if z.shape != (k, k):
            raise NetworkError(f"branch {self.id}: impedance block {z.shape} does not match phases {self.phases!r}")
        if np.any(np.diag(z).real < 0):
            raise NetworkError(f"branch {self.id}: negative self resistance")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)


def _phase_str(ph: str) -> str:
    ph = "".join(sorted(set(ph.lower())))
    if not ph or set(ph) - set(PHASES):
        raise NetworkError(f"bad phase set {ph!r}")
    return ph


@dataclass(frozen=True, eq=False)
class ThreePhaseNetwork:
    """Unbalanced radial feeder with per-bus phase masks.

    ``v0`` holds the squared substation voltage magnitude per phase (a, b, c).
    Bus phases must equal the phases of the branch feeding the bus.
    """

    n: int
    bus_phases: tuple[str, ...]
    branches: tuple[Branch3, ...]
    v0: tuple[float, float, float] = (1.0, 1.0, 1.0)
    angles0: tuple[float, float, float] = (0.0, -120.0, 120.0)

    def __post_init__(self):
        object.__setattr__(self, "bus_phases", tuple(_phase_str(p) for p in self.bus_phases))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "v0", tuple(float(v) for v in self.v0))
        if len(self.bus_phases) != self.n + 1:
            raise NetworkError("bus_phases must list all n+1 buses")
        if self.bus_phases[0] != PHASES:
            raise NetworkError("substation must carry all three phases")
        if any(v <= 0 for v in self.v0):
            raise NetworkError("substation voltages must be positive")
        for b in self.branches:
            ph = _phase_str(b.phases)
            if ph != b.phases:
                raise NetworkError(f"branch {b.id}: phases must be listed in abc order")
            for bus in (b.parent, b.child):
                if not 0 <= bus <= self.n:
                    raise NetworkError(f"branch {b.id} references bus {bus} outside 0..{self.n}")
            if set(ph) - set(self.bus_phases[b.parent]) or set(ph) - set(self.bus_phases[b.child]):
                raise NetworkError(f"branch {b.id}: phases {ph} not present at both ends")
        for b in self.skeleton_branches:  # orienting raises on cycles and islands
            if self.bus_phases[b.child] != b.phases:
                raise NetworkError(
                    f"bus {b.child} phases {self.bus_phases[b.child]} differ from feeding branch {b.id} phases {b.phases}"
                )

    @cached_property
    def skeleton_branches(self) -> tuple[Branch3, ...]:
        skel = orient(self.n, [Branch(b.id, b.parent, b.child, 0.0, 0.0) for b in self.branches])
        by_id = {b.id: b for b in self.branches}
        out = []
        for s in skel:
            b = by_id[s.id]
            out.append(b if b.parent == s.parent else replace(b, parent=s.parent, child=s.child))
        return tuple(out)

    @cached_property
    def single_phase_skeleton(self) -> RadialNetwork:
        """Oriented tree skeleton (positions match ``skeleton_branches``) with mean self-impedances."""
        brs = []
        for b in self.skeleton_branches:
            d = np.diag(b.z)
            brs.append(Branch(b.id, b.parent, b.child, float(d.real.mean()), float(d.imag.mean())))
        return RadialNetwork(self.n, tuple(brs), 1.0)

    @cached_property
    def bus_pairs(self) -> list[tuple[int, str]]:
        """(bus, phase) pairs of non-substation buses, ordered by bus then phase."""
        return [(bus, ph) for bus in range(1, self.n + 1) for ph in self.bus_phases[bus]]

    @cached_property
    def pair_index(self) -> dict[tuple[int, str], int]:
        return {p: k for k, p in enumerate(self.bus_pairs)}

    @cached_property
    def branch_pairs(self) -> list[tuple[int, str]]:
        """(branch position, phase) pairs ordered by branch then phase."""
        return [(k, ph) for k, b in enumerate(self.skeleton_branches) for ph in b.phases]

    @cached_property
    def branch_offsets(self) -> np.ndarray:
        sizes = [len(b.phases) for b in self.skeleton_branches]
        return np.concatenate([[0], np.cumsum(sizes)])

    @cached_property
    def path_matrix(self) -> sp.csr_matrix:
        """Phase-expanded path matrix; ``A3^-1 = -T3`` under the single-phase convention."""
        skel = self.skeleton_branches
        pos = {b.id: k for k, b in enumerate(skel)}
        paths = self._paths
        bp = {p: k for k, p in enumerate(self.branch_pairs)}
        rows, cols = [], []
        for (bus, ph), row in self.pair_index.items():
            for bid in paths[bus]:
                rows.append(row)
                cols.append(bp[(pos[bid], ph)])
        m = len(self.bus_pairs)
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m))

    @cached_property
    def path_matrix_t(self) -> sp.csr_matrix:
        return self.path_matrix.T.tocsr()

    @cached_property
    def _paths(self) -> dict[int, list[int]]:
        return branch_paths(self.single_phase_skeleton)

    @property
    def n_pairs(self) -> int:
        return len(self.bus_pairs)

    def v0_pairs(self) -> np.ndarray:
        return np.array([self.v0[PHASES.index(ph)] for _, ph in self.bus_pairs])

    def fingerprint_payload(self) -> dict:
        brs = []
        for b in sorted(self.branches, key=lambda e: e.id):
            brs.append(
                [
                    b.id,
                    min(b.parent, b.child),
                    max(b.parent, b.child),
                    b.phases,
                    [float(v).hex() for v in b.z.real.ravel()],
                    [float(v).hex() for v in b.z.imag.ravel()],
                ]
            )
        return {
            "kind": "3ph",
            "n": self.n,
            "phases": list(self.bus_pairs),
            "v0": [float(v).hex() for v in self.v0],
            "branches": brs,
        }


def incidence3(network: ThreePhaseNetwork) -> np.ndarray:
    """Dense phase-expanded reduced incidence (test and debugging use)."""
    A = np.zeros((network.n_pairs, network.n_pairs))
    bp = {p: k for k, p in enumerate(network.branch_pairs)}
    for k, b in enumerate(network.skeleton_branches):
        for ph in b.phases:
            row = bp[(k, ph)]
            A[row, network.pair_index[(b.child, ph)]] = -1.0
            if b.parent != 0:
                A[row, network.pair_index[(b.parent, ph)]] = 1.0
    return A
