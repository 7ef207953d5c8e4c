"""Post-run metrics, the curtailment-minimality check and scenario sweeps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import powerflow
from .comms import ExtremaEstimate
from .control import compute_margin_violation, q_capacity
from .engine import RunResult, run
from .scenario import ScenarioConfig, set_penetration
from .sensitivity import VoltageInference, select_anchors


def consensus_gaps(result: RunResult) -> dict:
    """Final network-wide C_p spread and per-cluster gamma_q spread over DER agents."""
    agents = result.agents
    cps = [ag.state.c_p for ag in agents.values()]
    per_cluster = {}
    sim_clusters = result.summary.get("gamma_q_gap", {})
    for cid, gap in sim_clusters.items():
        per_cluster[int(cid)] = gap
    return {"c_p": max(cps) - min(cps) if cps else 0.0, "gamma_q": per_cluster}


def _true_indices(v, params):
    return compute_margin_violation(ExtremaEstimate(float(v.max()), float(v.min())), params)


def perturbed_curtailment(result: RunResult, delta=0.01, t=None):
    """Re-solve the final operating point with every C_p lowered by ``delta``.

    Real power rises to ``(1 - C_p + delta) * P_avail``; the reactive
    capability shrinks accordingly and each unit keeps its utilisation
    ratio.  Returns ``(v, mu, xi)`` computed from the true voltages.
    """
    feeder = result.feeder
    t = result.log.rows[-1][0] if t is None else t
    saved = [(d.p_g, d.q_g) for d in feeder.ders]
    try:
        for d in feeder.ders:
            ag = result.agents.get(d.bus)
            cp = ag.state.c_p if ag is not None else 0.0
            gamma = ag.state.gamma_q if ag is not None else 0.0
            new_cp = min(max(cp - delta, 0.0), 1.0)
            d.p_g = (1.0 - new_cp) * d.available(t)
            d.q_g = gamma * q_capacity(d.s_cap, d.p_g)
        sol = powerflow.solve(feeder.network, *feeder.injections(t))
    finally:
        for d, (p, q) in zip(feeder.ders, saved):
            d.p_g, d.q_g = p, q
    params = next(iter(result.agents.values())).q_params
    mu, xi = _true_indices(sol.v, params)
    return sol.v, mu, xi


def steady_state_report(result: RunResult) -> dict:
    """Summary plus true-voltage band membership and the minimality check."""
    params = next(iter(result.agents.values())).q_params
    lo, hi = params.band
    v = result.solution.v
    mu_true, xi_true = _true_indices(v, params)
    _, mu_p, xi_p = perturbed_curtailment(result)
    return {
        **result.summary,
        "band": [lo, hi],
        "in_band": bool(v.min() >= lo and v.max() <= hi),
        "true_mu": mu_true,
        "true_xi": xi_true,
        "perturbed_xi": xi_p,
        "curtailment_minimal": bool(xi_p > 0.0),
    }


@dataclass
class SweepRow:
    penetration: float
    v_max: float
    v_min: float
    xi: float


def penetration_sweep(config: ScenarioConfig, levels, t=None) -> list[SweepRow]:
    """Open-loop voltage extremes as available DER power is rescaled.

    DERs run at their fixed power factor (``config.power_factor``) with no
    control; each level is a single power-flow solve at time ``t``
    (default: the end of the scenario).
    """
    base = config.load_feeder()
    t = config.duration if t is None else t
    params = config.q_params()
    base_avail = [(d.p_avail, d.s_cap) for d in base.ders]
    rows = []
    from .engine import _pf_reactive

    for level in levels:
        for d, (p, s) in zip(base.ders, base_avail):
            d.p_avail, d.s_cap = p, s
        if level > 0:
            set_penetration(base, level)
        for d in base.ders:
            d.p_g = min(d.available(t), d.s_cap) if level > 0 else 0.0
            d.q_g = -_pf_reactive(d.p_g, config.power_factor, d.s_cap)
        sol = powerflow.solve(base.network, *base.injections(t))
        _, xi = _true_indices(sol.v, params)
        rows.append(SweepRow(float(level), float(sol.v.max()), float(sol.v.min()), xi))
    return rows


def knee(rows: list[SweepRow]):
    """First penetration level with a band violation, or ``None``."""
    for r in rows:
        if r.xi > 0:
            return r.penetration
    return None


def inference_demo(config: ScenarioConfig, inj_up=0.4, inj_down=-0.2, load_scale=-0.2,
                   reading=None):
    """Sample, perturb, infer: returns rows ``(bus, true, inferred, rel_err)``.

    At the sampling instant all meters read the base operating point.  Then
    the first DER's injection changes by ``inj_up`` (relative), the last
    DER's by ``inj_down`` and every load by ``load_scale``; sampled buses
    are inferred from their real-time anchors and compared with the
    re-solved power flow.
    """
    feeder = config.load_feeder()
    net = feeder.network
    for d in feeder.ders:
        d.p_g, d.q_g = d.available(0.0), 0.0
    v_k = powerflow.solve(net, *feeder.injections(0.0)).v
    realtime = sorted({m.bus for m in feeder.meters if m.kind == "realtime"}
                      | {d.bus for d in feeder.ders})
    clusters = [list(c) for c in config.clusters]
    anchors = {}
    for m in feeder.meters:
        if m.kind != "sampled":
            continue
        local = sorted({b for c in clusters if m.bus in c for b in c} & set(realtime))
        pick = select_anchors(net, m.bus, local or realtime)
        if pick is not None:
            anchors[m.bus] = pick
    inf = VoltageInference(net, anchors, reading or config.inference_reading, config.eps_anchor)
    for j in anchors:
        inf.record_sample(j, 0.0, v_k)

    ders = sorted(feeder.ders, key=lambda d: d.bus)
    if ders:
        ders[0].p_g *= 1.0 + inj_up
        ders[-1].p_g *= 1.0 + inj_down
    for ld in feeder.loads:
        ld.p_d *= 1.0 + load_scale
        ld.q_d *= 1.0 + load_scale
    v_t = powerflow.solve(net, *feeder.injections(0.0)).v
    est = inf.estimate_all(v_t)
    rows = [(j, float(v_t[j]), float(e), abs(e - v_t[j]) / v_t[j]) for j, e in est.items()]
    return rows, inf


def run_and_report(config: ScenarioConfig, **kw) -> dict:
    return steady_state_report(run(config, **kw))


def max_abs(xs) -> float:
    xs = np.asarray(list(xs), dtype=float)
    return float(np.abs(xs).max()) if xs.size else 0.0
