import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import chain
from oracles import central_difference
from gridswarm import powerflow
from gridswarm.errors import DegenerateAnchor, UnknownBus
from gridswarm.network import build_network
from gridswarm.sensitivity import (MeterRecord, VoltageInference, exact_sensitivity,
                                   exact_sensitivity_matrices, infer_voltage,
                                   lossless_sensitivity, offset_inference, select_anchors)


def fd_columns(net, p, q, j, h=1e-5):
    """Central differences of the solver w.r.t. DER injection at ``j``."""
    def v_of(dp, dq):
        pp, qq = p.copy(), q.copy()
        pp[j] -= dp
        qq[j] -= dq
        return powerflow.solve(net, pp, qq, tol=1e-14, max_iter=500).v
    dvp = central_difference(lambda s: v_of(s, 0.0), 0.0, h)
    dvq = central_difference(lambda s: v_of(0.0, s), 0.0, h)
    return dvp, dvq


def rel_err(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def test_lossless_two_bus():
    s = lossless_sensitivity(chain([0.01], [0.02]))
    assert s.dv_dp[1, 1] == pytest.approx(0.01)
    assert s.dv_dq[1, 1] == pytest.approx(0.02)


def test_lossless_disjoint_paths_are_zero():
    net = build_network(range(3), [(0, 1, .01, .02), (0, 2, .01, .02)])
    s = lossless_sensitivity(net)
    assert s.dv_dp[1, 2] == 0.0 and s.dv_dq[2, 1] == 0.0


def test_exact_at_zero_flow_is_path_over_v0():
    net = chain([0.01] * 4, [0.02] * 4, v0=1.03)
    sol = powerflow.solve(net, np.zeros(5), np.zeros(5))
    dp, dq = exact_sensitivity(net, sol, 3)
    assert np.allclose(dp, net.path_r[:, 3] / 1.03, atol=1e-14)
    assert np.allclose(dq, net.path_x[:, 3] / 1.03, atol=1e-14)


def test_exact_matches_finite_differences_chain12(chain12):
    net = chain12.network
    p, q = chain12.load_injections()
    p, q = 2 * p, 2 * q
    sol = powerflow.solve(net, p, q, tol=1e-14, max_iter=500)
    for j in (4, 8, 11):
        dp, dq = exact_sensitivity(net, sol, j)
        fp, fq = fd_columns(net, p, q, j)
        assert rel_err(dp, fp) < 1e-3
        assert rel_err(dq, fq) < 1e-3


def test_other_readings_disagree_with_fd(tree40):
    # the subtree/factor choices matter on a deep loaded tree
    net = tree40.network
    p, q = tree40.load_injections()
    p, q = 3 * p, 3 * q
    sol = powerflow.solve(net, p, q, tol=1e-14, max_iter=500)
    j = 39
    fp, _ = fd_columns(net, p, q, j)
    good = exact_sensitivity(net, sol, j)[0]
    assert rel_err(good, fp) < 1e-6
    for kw in ({"subtree": "children"}, {"factors": "segment_m"}):
        assert rel_err(exact_sensitivity(net, sol, j, **kw)[0], fp) > 10 * rel_err(good, fp)


def test_exact_rejects_unknown_options(tree40):
    net = tree40.network
    sol = powerflow.solve(net, *tree40.load_injections())
    with pytest.raises(ValueError):
        exact_sensitivity_matrices(net, sol, subtree="ancestors")
    with pytest.raises(UnknownBus):
        exact_sensitivity(net, sol, 99)


def test_lossless_gap_shrinks_with_loading(tree40):
    net = tree40.network
    p, q = tree40.load_injections()
    ll = lossless_sensitivity(net)
    gaps = []
    for scale in (0.001, 0.1, 0.5, 1.0):
        sol = powerflow.solve(net, scale * p, scale * q)
        ex = exact_sensitivity_matrices(net, sol)
        gaps.append(max(rel_err(ex.dv_dq[1:, 1:], ll.dv_dq[1:, 1:]),
                        rel_err(ex.dv_dp[1:, 1:], ll.dv_dp[1:, 1:])))
    assert all(a < b for a, b in zip(gaps, gaps[1:]))


# -- inference ---------------------------------------------------------------

@given(st.floats(-0.05, 0.05), st.floats(0.9, 1.1), st.floats(0.001, 0.05), st.floats(-1, 2))
def test_difference_reading_uniform_shift(delta, vi, spread, frac):
    vl = vi - spread
    vj = vi - frac * spread
    est = infer_voltage(vi + delta, vl + delta, vi, vl, vj, "difference")
    assert est == pytest.approx(vj + delta, abs=1e-12)
    assert infer_voltage(vi, vl, vi, vl, vj, "difference") == pytest.approx(vj, abs=1e-12)


def test_literal_readings_do_not_reproduce_the_sample():
    vi, vl, vj = 1.0, 0.98, 0.99
    assert infer_voltage(vi, vl, vi, vl, vj, "verbatim") == pytest.approx(vj)
    assert infer_voltage(vi, vl, vi, vl, vj, "l_increment") == pytest.approx(vi)


def test_degenerate_anchor_and_fallback():
    with pytest.raises(DegenerateAnchor):
        infer_voltage(1.0, 1.0, 1.0, 1.00005, 0.99)
    with pytest.raises(ValueError):
        infer_voltage(1.0, 0.98, 1.0, 0.98, 0.99, reading="nope")
    assert offset_inference(1.01, 1.0, 0.99) == pytest.approx(1.0)
    net = chain([0.01] * 3, [0.02] * 3)
    inf = VoltageInference(net, {2: (1, 3)})
    inf.record_sample(2, 0.0, np.array([1.0, 1.0, 0.99, 1.00005]))
    est = inf.estimate(2, np.array([1.0, 1.01, 1.0, 1.01]))
    assert est == pytest.approx(1.0) and inf.fallbacks == {2}


def test_select_anchors():
    net = build_network(range(6), [(0, 1, .01, .01), (1, 2, .01, .01), (2, 3, .01, .01),
                                   (1, 4, .01, .01), (4, 5, .01, .01)])
    assert select_anchors(net, 2, [1, 3, 5]) == (1, 3)
    assert select_anchors(net, 3, [1, 2]) == (2, 1)
    assert select_anchors(net, 2, [3]) == (3, None)
    assert select_anchors(net, 5, [3]) == (3, None)
    assert select_anchors(net, 2, []) is None


def test_meter_sampling_grid():
    m = MeterRecord(7, "sampled", period=10.0)
    assert m.update(0.0, 1.0)
    assert not m.update(9.5, 1.1) and m.last_value == 1.0
    assert m.update(23.0, 1.2) and m.last_sample_time == 20.0
    rt = MeterRecord(3)
    assert rt.update(0.1, 1.0) and rt.update(0.2, 1.01)
    with pytest.raises(ValueError):
        MeterRecord(1, "weekly")
