"""Clustered peer-to-peer communication with per-hop delays.

Agents exchange a small payload every protocol round.  Messages sit in a
delay queue until their delivery time; delivery order is deterministic
(delivery time, then sender, then a global sequence number), which also
keeps every edge FIFO because each edge has a fixed delay.
"""
from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .errors import ValidationError

INTRA_DELAY = 0.1
INTER_DELAY = 0.8
# Messages due within this slack of a round boundary are delivered in it.
TIME_EPS = 1e-9


class Payload(NamedTuple):
    v: float
    v_h: float
    v_l: float
    gamma_q: float
    c_p: float
    # origin tags of v_h and v_l (see TimedExtrema)
    t_h: float = 0.0
    t_l: float = 0.0
    src_h: int = -1
    src_l: int = -1


@dataclass(frozen=True)
class Message:
    sender: int
    receiver: int
    send_time: float
    deliver_time: float
    seq: int
    payload: Payload

    def record(self) -> dict:
        return {
            "send_time": self.send_time,
            "deliver_time": self.deliver_time,
            "from": self.sender,
            "to": self.receiver,
            "payload": dict(self.payload._asdict()),
        }


class ExtremaEstimate(NamedTuple):
    v_h: float
    v_l: float


def step_extrema(values: Iterable[float], estimates: Iterable[ExtremaEstimate],
                 dt: float, literal_min: bool = False) -> ExtremaEstimate:
    """One round of the max/min voltage protocols.

    ``values`` are the fresh voltages in the node's neighbourhood (its own
    reading included, plus inferred values of unmetered neighbours);
    ``estimates`` are the previous-round extrema held by the node and
    reported by its neighbours.  Stale maxima are discounted by ``1 - dt``
    before competing with the fresh values; stale minima are inflated by
    ``1 + dt`` so they too are forgotten.  ``literal_min=True`` applies
    ``1 - dt`` to the minima as well, under which the minimum estimate
    decays towards zero and never recovers.
    """
    if not 0.0 <= dt < 1.0:
        raise ValueError("forgetting increment must lie in [0, 1)")
    values = list(values)
    if not values:
        raise ValueError("at least the node's own voltage is required")
    v_h = max(values)
    v_l = min(values)
    estimates = list(estimates)
    if estimates:
        v_h = max(v_h, (1.0 - dt) * max(e.v_h for e in estimates))
        grow = 1.0 - dt if literal_min else 1.0 + dt
        v_l = min(v_l, grow * min(e.v_l for e in estimates))
    return ExtremaEstimate(v_h, v_l)


class TimedExtrema(NamedTuple):
    """Extrema tagged with the bus each value came from and when it was measured."""

    v_h: float
    t_h: float
    v_l: float
    t_l: float
    src_h: int = -1
    src_l: int = -1


def effective_extrema(est: TimedExtrema, now, dt, horizon, round_period) -> ExtremaEstimate:
    """Apply the forgetting factor to the part of each age beyond ``horizon``."""
    def rounds(t0):
        return max(0.0, now - t0 - horizon) / round_period

    return ExtremaEstimate(est.v_h * (1.0 - dt) ** rounds(est.t_h),
                           est.v_l * (1.0 + dt) ** rounds(est.t_l))


def _latest_per_source(cands):
    latest = {}
    for v, t, src in cands:
        old = latest.get(src)
        if old is None or t > old[1] or (t == old[1] and v > old[0]):
            latest[src] = (v, t, src)
    return latest.values()


def step_extrema_timed(now, values, estimates, dt, horizon, round_period) -> TimedExtrema:
    """Delay-aware max/min protocol round.

    ``values`` are fresh ``(voltage, bus)`` readings taken at ``now``;
    ``estimates`` are the held and received :class:`TimedExtrema`.  A newer
    value from a bus supersedes any older value from the same bus.  The
    surviving candidates are weighed by ``1 - dt`` (``1 + dt`` for minima)
    per round of age beyond ``horizon``, the time information needs to cross
    the graph, and the best one wins with its original tags.  Within the
    horizon candidates compete at face value, so in steady state every node
    holds the exact extrema; a value its source no longer refreshes is
    forgotten once it outlives the horizon.
    """
    if not 0.0 <= dt < 1.0:
        raise ValueError("forgetting increment must lie in [0, 1)")
    values = list(values)
    if not values:
        raise ValueError("at least the node's own voltage is required")
    estimates = list(estimates)
    highs = [(v, now, src) for v, src in values] + [(e.v_h, e.t_h, e.src_h) for e in estimates]
    lows = [(v, now, src) for v, src in values] + [(e.v_l, e.t_l, e.src_l) for e in estimates]

    def weigh(v, t, factor):
        excess = now - t - horizon
        return v if excess <= 0.0 else v * factor ** (excess / round_period)

    keep, grow = 1.0 - dt, 1.0 + dt
    best_h = max(_latest_per_source(highs), key=lambda c: (weigh(c[0], c[1], keep), c[1], -c[2]))
    best_l = min(_latest_per_source(lows), key=lambda c: (weigh(c[0], c[1], grow), -c[1], c[2]))
    return TimedExtrema(best_h[0], best_h[1], best_l[0], best_l[1], best_h[2], best_l[2])


class CommGraph:
    """Undirected communication graph partitioned into (overlapping) clusters.

    Parameters
    ----------
    nodes : iterable of int
        Agent ids (bus ids of DERs and relay meters).
    edges : iterable of (int, int)
        Undirected links.
    cluster_of : dict
        ``node -> iterable of cluster ids``.
    """

    def __init__(self, nodes, edges, cluster_of, intra_delay=INTRA_DELAY,
                 inter_delay=INTER_DELAY, require_connected=True):
        self.nodes = tuple(sorted(set(int(n) for n in nodes)))
        self.cluster_of = {n: frozenset(cluster_of.get(n, ())) for n in self.nodes}
        self.intra_delay = float(intra_delay)
        self.inter_delay = float(inter_delay)
        nbrs = {n: set() for n in self.nodes}
        for a, b in edges:
            a, b = int(a), int(b)
            if a not in nbrs or b not in nbrs:
                raise ValidationError(f"comm edge ({a}, {b}) references a non-agent node")
            if a == b:
                continue
            nbrs[a].add(b)
            nbrs[b].add(a)
        self.neighbors = {n: tuple(sorted(v)) for n, v in nbrs.items()}
        if require_connected and not self.is_connected():
            raise ValidationError("communication graph is not connected")

    @property
    def edges(self):
        return sorted((a, b) for a in self.nodes for b in self.neighbors[a] if a < b)

    def same_cluster(self, a, b) -> bool:
        return bool(self.cluster_of[a] & self.cluster_of[b])

    def delay(self, a, b) -> float:
        return self.intra_delay if self.same_cluster(a, b) else self.inter_delay

    def members(self, cluster) -> list[int]:
        return [n for n in self.nodes if cluster in self.cluster_of[n]]

    def _bfs(self, src):
        dist = {src: 0}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in self.neighbors[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    def is_connected(self) -> bool:
        if not self.nodes:
            return True
        return len(self._bfs(self.nodes[0])) == len(self.nodes)

    def diameter(self) -> int:
        return max(max(self._bfs(n).values()) for n in self.nodes)

    def latency_diameter(self, per_hop=0.0) -> float:
        """Largest shortest-path delivery delay between any two nodes (s).

        ``per_hop`` adds a fixed forwarding time to every edge, e.g. the
        round period a relayed value waits before it is re-broadcast.
        """
        if len(self.nodes) < 2:
            return 0.0
        idx = {n: k for k, n in enumerate(self.nodes)}
        w = np.zeros((len(self.nodes), len(self.nodes)))
        for a, b in self.edges:
            w[idx[a], idx[b]] = w[idx[b], idx[a]] = self.delay(a, b) + per_hop
        dist = shortest_path(csr_matrix(w), directed=False)
        return float(dist[np.isfinite(dist)].max())

    @classmethod
    def from_clusters(cls, clusters, agents, links=None, edges=None, **kw):
        """Build the default topology.

        Each cluster's agents (in listed order) form a chain.  Clusters that
        share an agent are joined through it; ``links`` adds explicit
        inter-cluster edges, and when absent, consecutive clusters without a
        shared agent are linked last-agent-to-first-agent.  ``edges``
        overrides everything with an explicit adjacency.
        """
        agents = set(agents)
        cluster_of = {}
        members = []
        for cid, buses in enumerate(clusters):
            ms = [b for b in buses if b in agents]
            members.append(ms)
            for b in ms:
                cluster_of.setdefault(b, set()).add(cid)
        if edges is None:
            edges = []
            for ms in members:
                edges += list(zip(ms, ms[1:]))
            if links is not None:
                edges += [tuple(e) for e in links]
            else:
                for a, b in zip(members, members[1:]):
                    if a and b and not set(a) & set(b):
                        edges.append((a[-1], b[0]))
        return cls(sorted(cluster_of), edges, cluster_of, **kw)


class MessageQueue:
    """Delay queue owned by the simulation engine."""

    def __init__(self, graph: CommGraph, trace=False):
        self.graph = graph
        self._heap = []
        self._seq = 0
        self.trace = [] if trace else None
        self.sent = 0
        self.delivered = 0

    def __len__(self):
        return len(self._heap)

    def send(self, sender, receiver, now, payload) -> Message:
        msg = Message(sender, receiver, now, now + self.graph.delay(sender, receiver),
                      self._seq, payload)
        self._seq += 1
        self.sent += 1
        heapq.heappush(self._heap, (msg.deliver_time, msg.sender, msg.seq, msg))
        return msg

    def broadcast(self, sender, now, payload):
        for nb in self.graph.neighbors[sender]:
            self.send(sender, nb, now, payload)

    def route(self, now) -> list[Message]:
        """Pop every message with ``deliver_time <= now`` in delivery order."""
        out = []
        heap = self._heap
        while heap and heap[0][0] <= now + TIME_EPS:
            out.append(heapq.heappop(heap)[3])
        self.delivered += len(out)
        if self.trace is not None:
            self.trace.extend(out)
        return out

    def dump_trace(self, fh):
        """Write delivered messages as newline-delimited JSON."""
        for msg in self.trace or ():
            fh.write(json.dumps(msg.record(), sort_keys=True) + "\n")


def route(queue: MessageQueue, now) -> list[Message]:
    return queue.route(now)
