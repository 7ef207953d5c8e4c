import math

import pytest

from gridswarm.comms import (CommGraph, ExtremaEstimate, MessageQueue, Payload, TimedExtrema,
                             effective_extrema, route, step_extrema, step_extrema_timed)
from gridswarm.errors import ValidationError

P = Payload(1.0, 1.0, 1.0, 0.0, 0.0)


def two_cluster_graph():
    return CommGraph.from_clusters([[1, 2, 3], [4, 5]], agents=[1, 2, 3, 4, 5])


def test_route_empty():
    assert route(MessageQueue(two_cluster_graph()), 10.0) == []


def test_intra_and_inter_cluster_delays():
    g = two_cluster_graph()
    assert g.edges == [(1, 2), (2, 3), (3, 4), (4, 5)]
    q = MessageQueue(g)
    q.send(1, 2, 5.0, P)
    q.send(3, 4, 5.0, P)
    assert route(q, 5.09) == []
    got = route(q, 5.1)
    assert [(m.sender, m.receiver) for m in got] == [(1, 2)]
    assert route(q, 5.79) == []
    got = route(q, 5.8)
    assert [(m.sender, m.receiver, m.deliver_time) for m in got] == [(3, 4, pytest.approx(5.8))]
    assert len(q) == 0 and q.sent == q.delivered == 2


def test_fifo_per_edge_and_deterministic_order():
    g = two_cluster_graph()
    q = MessageQueue(g, trace=True)
    for k in range(5):
        q.send(2, 1, 0.01 * k, P._replace(v=float(k)))
        q.send(3, 2, 0.01 * k, P._replace(v=10.0 + k))
    got = route(q, 1.0)
    assert [m.payload.v for m in got if m.sender == 2] == [0, 1, 2, 3, 4]
    keys = [(m.deliver_time, m.sender, m.seq) for m in got]
    assert keys == sorted(keys)


def test_graph_validation():
    with pytest.raises(ValidationError):
        CommGraph([1, 2], [(1, 3)], {})
    with pytest.raises(ValidationError):
        CommGraph([1, 2, 3], [(1, 2)], {})
    g = CommGraph(list(range(9)), [(k, k + 1) for k in range(8)], {k: {0} for k in range(9)})
    assert g.diameter() == 8
    assert g.latency_diameter() == pytest.approx(0.8)
    assert g.latency_diameter(per_hop=0.01) == pytest.approx(0.88)


def test_step_extrema_examples():
    est = ExtremaEstimate(1.10, 1.10)
    for _ in range(10):
        est = step_extrema([1.02], [est], dt=0.1)
    assert est.v_h == pytest.approx(1.02)
    assert step_extrema([1.02], [ExtremaEstimate(1.10, 1.0)], 0.1).v_h == pytest.approx(1.02)
    with pytest.raises(ValueError):
        step_extrema([], [], 0.1)


def _flood(n, values, rounds, dt, literal_min=False):
    est = [ExtremaEstimate(v, v) for v in values]
    for _ in range(rounds):
        est = [step_extrema([values[i]], [est[j] for j in (i - 1, i, i + 1) if 0 <= j < n],
                            dt, literal_min) for i in range(n)]
    return est


def test_max_flooding_within_diameter_rounds():
    values = [1.0 + 0.001 * k for k in range(9)]
    dt = 0.001
    est = _flood(9, values, 8, dt)
    true_max, true_min = max(values), min(values)
    for e in est:
        assert true_max * (1 - dt) ** 8 <= e.v_h <= true_max
        assert true_min <= e.v_l <= true_min * (1 + dt) ** 8


def test_spike_is_forgotten():
    values = [1.0] * 5
    est = [ExtremaEstimate(1.3 if i == 2 else 1.0, 1.0) for i in range(5)]
    dt = 0.05
    bound = math.ceil(math.log(1.3) / -math.log(1 - dt)) + 5
    for _ in range(bound):
        est = [step_extrema([values[i]], [est[j] for j in (i - 1, i, i + 1) if 0 <= j < 5], dt)
               for i in range(5)]
    assert all(e.v_h == pytest.approx(1.0) for e in est)


def test_literal_min_collapses():
    est = _flood(3, [1.0, 0.99, 1.01], 2000, 0.01, literal_min=True)
    assert max(e.v_l for e in est) < 1e-3
    est = _flood(3, [1.0, 0.99, 1.01], 2000, 0.01)
    # mirrored forgetting: one hop from the minimum costs one (1 + dt) factor
    assert est[1].v_l == pytest.approx(0.99)
    assert all(0.99 <= e.v_l <= 0.99 * 1.01 + 1e-12 for e in est)


def test_timed_extrema_superseded_by_same_source():
    old = TimedExtrema(1.08, 0.0, 0.97, 0.0, 5, 5)
    new = step_extrema_timed(0.5, [(1.01, 5), (1.02, 6)], [old], dt=0.01, horizon=1.0,
                             round_period=0.01)
    assert new.v_h == 1.02 and new.src_h == 6
    assert new.v_l == 1.01 and new.src_l == 5


def test_timed_extrema_forget_beyond_horizon():
    stale = TimedExtrema(1.08, 0.0, 0.95, 0.0, 9, 9)
    keep = step_extrema_timed(0.5, [(1.0, 1)], [stale], 0.01, horizon=1.0, round_period=0.01)
    assert keep.v_h == 1.08 and keep.v_l == 0.95
    drop = step_extrema_timed(3.0, [(1.0, 1)], [stale], 0.01, horizon=1.0, round_period=0.01)
    assert drop.v_h == 1.0 and drop.v_l == 1.0
    eff = effective_extrema(stale, 1.5, 0.01, 1.0, 0.01)
    assert eff.v_h == pytest.approx(1.08 * 0.99**50)
    assert eff.v_l == pytest.approx(0.95 * 1.01**50)
