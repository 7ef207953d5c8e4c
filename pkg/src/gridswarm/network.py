"""Radial feeder topology, devices and common-path parameter matrices.

Buses are integers ``0..n-1`` with bus 0 the feeder head (slack).  Every
non-root bus ``i`` owns the line segment from its parent to itself, so all
per-segment arrays (``r``, ``x``, ``b``) are indexed by the child bus and
hold zero at index 0.
"""
from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    CycleDetected,
    DisconnectedBus,
    DuplicateLine,
    NonPositiveResistance,
    UnknownBus,
)

# Dense common-path matrices are only materialised below this size.
DENSE_LIMIT = 2000


@dataclass(frozen=True)
class LineSegment:
    """Segment ``from_bus -> to_bus`` keyed by its child bus."""

    from_bus: int
    to_bus: int
    r: float
    x: float

    @property
    def b(self) -> float:
        return self.x / self.r

    @property
    def z2(self) -> float:
        return self.r * self.r + self.x * self.x


class Profile:
    """Piecewise-constant schedule of multipliers.

    ``Profile([(0, 1.0), (10, 1.4)])`` is 1.0 on ``[0, 10)`` and 1.4 from
    ``t=10`` on.  Before the first breakpoint the first value applies.
    """

    def __init__(self, points: Iterable[Sequence[float]] = ((0.0, 1.0),)):
        pts = sorted((float(t), float(v)) for t, v in points)
        if not pts:
            pts = [(0.0, 1.0)]
        for _, v in pts:
            if not np.isfinite(v):
                raise ValueError("profile values must be finite")
        self.times = [t for t, _ in pts]
        self.values = [v for _, v in pts]

    def __call__(self, t: float) -> float:
        k = bisect.bisect_right(self.times, t) - 1
        return self.values[max(k, 0)]

    def __repr__(self):
        return f"Profile({list(zip(self.times, self.values))!r})"

    @classmethod
    def constant(cls, value=1.0):
        return cls([(0.0, value)])


@dataclass
class DerUnit:
    """Inverter-interfaced DER.

    ``p_avail`` is the base available real power; the time-varying value is
    ``p_avail * profile(t)``.  ``p_g``/``q_g`` are the current setpoints.
    """

    bus: int
    s_cap: float
    p_avail: float
    p_g: float = 0.0
    q_g: float = 0.0
    profile: Profile = field(default_factory=Profile)
    name: str | None = None

    def available(self, t: float = 0.0) -> float:
        return self.p_avail * self.profile(t)

    @property
    def q_cap(self) -> float:
        return float(np.sqrt(max(self.s_cap**2 - self.p_g**2, 0.0)))


@dataclass
class LoadPoint:
    bus: int
    p_d: float
    q_d: float
    profile: Profile = field(default_factory=Profile)

    def at(self, t: float = 0.0) -> tuple[float, float]:
        s = self.profile(t)
        return self.p_d * s, self.q_d * s


class RadialNetwork:
    """Immutable radial network plus its common-path matrices.

    Attributes
    ----------
    n : int
        Number of buses including the feeder head.
    parent : ndarray of int
        ``parent[i]`` is the parent bus; ``parent[0] == -1``.
    r, x, b : ndarray
        Segment resistance, reactance and ``x/r`` keyed by child bus.
    children, descendants : tuple of frozenset
        Children and strict descendants of every bus.
    subtree : scipy.sparse.csr_matrix
        ``subtree[s, k] == 1`` iff bus ``k`` is ``s`` or lies below ``s``.
        Row 0 is empty (bus 0 owns no segment).  The transpose maps a bus to
        the segments on its path from the feeder head.
    path_r, path_x, path_zp : ndarray or None
        Common-path sums and the loss-coupling matrix, dense up to
        ``DENSE_LIMIT`` buses.  Larger networks use :meth:`common_path`.
    """

    def __init__(self, parent, r, x, v0=1.0):
        self.parent = np.asarray(parent, dtype=int)
        self.n = len(self.parent)
        self.r = np.asarray(r, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.v0 = float(v0)
        self.b = np.zeros(self.n)
        self.b[1:] = self.x[1:] / self.r[1:]
        self.z2 = self.r**2 + self.x**2

        kids = [[] for _ in range(self.n)]
        for i in range(1, self.n):
            kids[self.parent[i]].append(i)
        self.children = tuple(frozenset(c) for c in kids)

        order, depth = [0], np.zeros(self.n, dtype=int)
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for c in sorted(kids[u]):
                depth[c] = depth[u] + 1
                order.append(c)
                queue.append(c)
        self.order = np.array(order)
        self.depth = depth

        # ancestors-including-self lists give path membership directly
        rows, cols = [], []
        desc = [set() for _ in range(self.n)]
        for k in range(1, self.n):
            s = k
            while s != 0:
                rows.append(s)
                cols.append(k)
                if s != k:
                    desc[s].add(k)
                s = self.parent[s]
        for k in range(1, self.n):
            desc[0].add(k)
        self.descendants = tuple(frozenset(d) for d in desc)
        self.subtree = sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(self.n, self.n)
        )

        if self.n <= DENSE_LIMIT:
            self.path_r = self._common(self.r)
            self.path_x = self._common(self.x)
            self.path_zp = self._zprime()
            for arr in (self.path_r, self.path_x, self.path_zp):
                arr.setflags(write=False)
        else:
            self.path_r = self.path_x = self.path_zp = None
        for arr in (self.parent, self.r, self.x, self.b, self.z2, self.depth):
            arr.setflags(write=False)

    def _common(self, w):
        a = self.subtree
        return np.asarray((a.T @ sp.diags(w) @ a).todense())

    def _zprime(self):
        # on_path[k, i] = 1 iff i is a strict ancestor-segment of k (k in D_i)
        strict = self.subtree.toarray()
        np.fill_diagonal(strict, 0.0)
        below = strict.T
        rp = self.path_r - below * self.r[None, :]
        xp = self.path_x - below * self.x[None, :]
        return rp + self.b[None, :] * xp

    # -- queries -----------------------------------------------------------
    @property
    def buses(self) -> list[int]:
        return list(range(self.n))

    @property
    def lines(self) -> list[LineSegment]:
        return [
            LineSegment(int(self.parent[i]), i, float(self.r[i]), float(self.x[i]))
            for i in range(1, self.n)
        ]

    def check_bus(self, bus) -> int:
        if not (isinstance(bus, (int, np.integer)) and 0 <= bus < self.n):
            raise UnknownBus(f"unknown bus {bus!r}")
        return int(bus)

    def path(self, k) -> list[int]:
        """Buses on the path from the feeder head to ``k`` (inclusive)."""
        k = self.check_bus(k)
        out = [k]
        while k != 0:
            k = int(self.parent[k])
            out.append(k)
        return out[::-1]

    def is_ancestor(self, a, k) -> bool:
        """True iff ``a`` lies on the path from bus 0 to ``k`` (``a == k`` counts)."""
        return a == k or k in self.descendants[a]

    def common_path(self, k, i, which="r") -> float:
        """Sum of segment ``which`` over the common part of the paths to k and i."""
        w = self.r if which == "r" else self.x
        pk = set(self.path(k))
        return float(sum(w[s] for s in self.path(i) if s in pk and s != 0))

    def on_path_matrix(self) -> np.ndarray:
        """``M[k, i] = 1`` iff segment ``i`` is on the path to ``k`` (includes k)."""
        return self.subtree.T.toarray()

    def __repr__(self):
        return f"RadialNetwork(n={self.n}, v0={self.v0})"


def build_network(buses, lines, v0=1.0) -> RadialNetwork:
    """Validate a line list and build the immutable network.

    Parameters
    ----------
    buses : iterable of int
        Bus ids; must be exactly ``0..n-1``.
    lines : iterable
        ``LineSegment`` objects or ``(from_bus, to_bus, r, x)`` tuples with
        ``from_bus`` the parent.
    v0 : float
        Feeder-head voltage in pu.
    """
    buses = sorted(set(int(b) for b in buses))
    n = len(buses)
    if n == 0 or buses[0] != 0:
        raise DisconnectedBus("bus 0 (feeder head) is missing")
    if buses != list(range(n)):
        missing = sorted(set(range(buses[-1] + 1)) - set(buses))
        raise DisconnectedBus(f"bus ids must be contiguous from 0; missing {missing}")

    segs = []
    for ln in lines:
        if not isinstance(ln, LineSegment):
            ln = LineSegment(int(ln[0]), int(ln[1]), float(ln[2]), float(ln[3]))
        for end in (ln.from_bus, ln.to_bus):
            if not 0 <= end < n:
                raise UnknownBus(f"line {ln.from_bus}->{ln.to_bus} references unknown bus {end}")
        if ln.from_bus == ln.to_bus:
            raise CycleDetected(f"self-loop at bus {ln.to_bus}")
        if not ln.r > 0:
            raise NonPositiveResistance(
                f"segment {ln.from_bus}->{ln.to_bus} has r={ln.r}; r must be > 0"
            )
        if ln.x < 0:
            raise ValueError(f"segment {ln.from_bus}->{ln.to_bus} has negative x")
        segs.append(ln)

    parent = np.full(n, -1)
    r = np.zeros(n)
    x = np.zeros(n)
    seen = set()
    for ln in segs:
        key = frozenset((ln.from_bus, ln.to_bus))
        if key in seen:
            raise DuplicateLine(f"duplicate line between buses {ln.from_bus} and {ln.to_bus}")
        seen.add(key)
        if ln.to_bus == 0:
            raise CycleDetected(f"line {ln.from_bus}->0 gives the feeder head a parent")
        if parent[ln.to_bus] != -1:
            raise DuplicateLine(
                f"bus {ln.to_bus} has two parents ({parent[ln.to_bus]} and {ln.from_bus})"
            )
        parent[ln.to_bus] = ln.from_bus
        r[ln.to_bus], x[ln.to_bus] = ln.r, ln.x

    orphans = [i for i in range(1, n) if parent[i] == -1]
    if orphans:
        raise DisconnectedBus(f"buses without a supplying line: {orphans}")
    state = np.zeros(n, dtype=int)  # 0 unseen, 1 on current walk, 2 reaches bus 0
    state[0] = 2
    for start in range(1, n):
        walk = []
        b = start
        while state[b] == 0:
            state[b] = 1
            walk.append(b)
            b = parent[b]
        if state[b] == 1:
            raise CycleDetected(f"cycle through bus {b}; it is not reachable from bus 0")
        state[walk] = 2
    return RadialNetwork(parent, r, x, v0=v0)


class Feeder:
    """A network with its devices attached.

    Devices are mutable (setpoints, profiles); the network is not.
    """

    def __init__(self, network: RadialNetwork, ders=(), loads=(), meters=(), name=None):
        self.network = network
        self.ders = list(ders)
        self.loads = list(loads)
        self.meters = list(meters)
        self.name = name
        for dev in [*self.ders, *self.loads, *self.meters]:
            network.check_bus(dev.bus)

    def der_at(self, bus):
        return [d for d in self.ders if d.bus == bus]

    def net_injection(self, bus, t=0.0) -> tuple[float, float]:
        """Net injection ``P_i + jQ_i = -(P_g + jQ_g) + (P_d + jQ_d)`` at ``bus``."""
        self.network.check_bus(bus)
        p = q = 0.0
        for d in self.ders:
            if d.bus == bus:
                p -= d.p_g
                q -= d.q_g
        for ld in self.loads:
            if ld.bus == bus:
                pd, qd = ld.at(t)
                p += pd
                q += qd
        return p, q

    def injections(self, t=0.0) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised :meth:`net_injection` over all buses."""
        p = np.zeros(self.network.n)
        q = np.zeros(self.network.n)
        for d in self.ders:
            p[d.bus] -= d.p_g
            q[d.bus] -= d.q_g
        for ld in self.loads:
            pd, qd = ld.at(t)
            p[ld.bus] += pd
            q[ld.bus] += qd
        return p, q

    def load_injections(self, t=0.0):
        p = np.zeros(self.network.n)
        q = np.zeros(self.network.n)
        for ld in self.loads:
            pd, qd = ld.at(t)
            p[ld.bus] += pd
            q[ld.bus] += qd
        return p, q

    def total_load(self, t=0.0) -> float:
        return float(sum(ld.at(t)[0] for ld in self.loads))

    def total_available(self, t=0.0) -> float:
        return float(sum(d.available(t) for d in self.ders))
