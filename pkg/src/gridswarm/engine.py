"""Closed-loop quasi-static co-simulation of feeder, meters, comms and agents.

Each power-flow step of length ``dt_pf``:

1. apply load and DER profiles for the step's start time;
2. solve the power flow with the currently committed setpoints;
3. update meters (real-time every step, sampled ones on their grid);
4. infer the voltages of sampled-only buses;
5. run ``dt_pf / dt_round`` communication rounds, each delivering due
   messages, updating the extrema estimates and margin/violation indices,
   then stepping the controllers ``dt_round / dt_ctrl`` times and
   broadcasting the new payload;
6. commit the controllers' setpoints to the DER units;
7. append a log row.

Agents are the DER buses plus any real-time-metered bus listed in a
cluster, which relays consensus information without a DER of its own.
"""
from __future__ import annotations

import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import powerflow
from .comms import (TIME_EPS, CommGraph, ExtremaEstimate, MessageQueue, Payload, TimedExtrema,
                    effective_extrema, step_extrema_timed)
from .control import (AgentState, PControlParams, QControlParams, compute_margin_violation,
                      q_capacity, step_p, step_q, update_vref)
from .errors import NotConverged, ValidationError
from .network import Feeder
from .scenario import ScenarioConfig
from .sensitivity import VoltageInference, select_anchors

log = logging.getLogger(__name__)


def fmt(x) -> str:
    """Deterministic, locale-free number formatting for CSV output."""
    return format(float(x), ".12g")


@dataclass
class Agent:
    bus: int
    has_der: bool
    q_params: QControlParams
    p_params: PControlParams
    x_ii: float
    s_cap: float = 0.0
    state: AgentState = field(default_factory=AgentState)
    p_g: float = 0.0
    q_g: float = 0.0
    # latest message received from each neighbour
    inbox: dict = field(default_factory=dict)
    timed: TimedExtrema | None = None


class TimeSeriesLog:
    """Per-step records with a fixed column set.

    Columns, in order: ``t``; ``v_<bus>`` for every bus; per agent
    ``gq_<a>``, ``cp_<a>``, ``gp_<a>``, ``vh_<a>``, ``vl_<a>``, ``mu_<a>``,
    ``xi_<a>``, ``pg_<a>``, ``qg_<a>``; ``vhat_<j>`` per inferred bus; then
    ``vmax``, ``vmin``, ``curtail_pct`` and ``p_loss``.
    """

    AGENT_FIELDS = ("gq", "cp", "gp", "vh", "vl", "mu", "xi", "pg", "qg")

    def __init__(self, n_bus, agents, inferred):
        self.agents = list(agents)
        self.inferred = list(inferred)
        self.columns = (
            ["t"]
            + [f"v_{b}" for b in range(n_bus)]
            + [f"{f}_{a}" for a in self.agents for f in self.AGENT_FIELDS]
            + [f"vhat_{j}" for j in self.inferred]
            + ["vmax", "vmin", "curtail_pct", "p_loss"]
        )
        self.index = {c: k for k, c in enumerate(self.columns)}
        self.rows: list[list[float]] = []
        self.aborted = False

    def append(self, row):
        if len(row) != len(self.columns):
            raise ValueError("log row does not match the declared columns")
        if self.rows and row[0] <= self.rows[-1][0]:
            raise ValueError("log time must increase")
        self.rows.append(list(map(float, row)))

    def __len__(self):
        return len(self.rows)

    def array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float).reshape(len(self.rows), len(self.columns))

    def column(self, name) -> np.ndarray:
        k = self.index[name]
        return np.array([r[k] for r in self.rows])

    def last(self, name) -> float:
        return self.rows[-1][self.index[name]]

    def to_csv(self, fh=None) -> str | None:
        out = fh if fh is not None else io.StringIO()
        out.write(",".join(self.columns) + "\n")
        for r in self.rows:
            out.write(",".join(fmt(x) for x in r) + "\n")
        return None if fh is not None else out.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="\n") as fh:
            self.to_csv(fh)


@dataclass
class RunResult:
    log: TimeSeriesLog
    summary: dict
    feeder: Feeder
    agents: dict
    graph: CommGraph
    queue: MessageQueue
    solution: powerflow.PowerFlowSolution | None = None


class Simulation:
    """Stateful closed loop; :func:`run` is the one-shot wrapper."""

    def __init__(self, config: ScenarioConfig, feeder: Feeder | None = None, debug=False,
                 trace=False):
        self.cfg = config
        self.feeder = feeder if feeder is not None else config.load_feeder()
        self.net = self.feeder.network
        self.debug = debug
        self.rng = np.random.default_rng(config.seed)
        self._build_agents()
        self.queue = MessageQueue(self.graph, trace=trace)
        self.horizon = (config.extrema_horizon if config.extrema_horizon is not None
                        else self.graph.latency_diameter(per_hop=config.dt_round) + config.dt_round)
        self._build_inference()
        self.log = TimeSeriesLog(self.net.n, sorted(self.agents), sorted(self.inferred))
        self.t = 0.0
        self.step_index = 0
        self.solution = None
        self.n_rounds = int(round(config.dt_pf / config.dt_round))
        self.n_sub = int(round(config.dt_round / config.dt_ctrl))
        self._initialised = False

    # -- setup ---------------------------------------------------------------

    def _build_agents(self):
        cfg, net = self.cfg, self.net
        der_buses = {}
        for d in self.feeder.ders:
            der_buses.setdefault(d.bus, []).append(d)
        realtime = {m.bus for m in self.feeder.meters if m.kind == "realtime"}
        clusters = [[int(b) for b in c] for c in cfg.clusters] or [sorted(der_buses)]
        in_cluster = {b for c in clusters for b in c}
        missing = sorted(set(der_buses) - in_cluster)
        if missing:
            raise ValidationError(f"DER buses {missing} are not covered by any cluster")
        agent_buses = set(der_buses) | (realtime & in_cluster)
        self.clusters = clusters
        self.graph = CommGraph.from_clusters(
            clusters, agent_buses, links=cfg.cluster_links, edges=cfg.comm_edges,
            intra_delay=cfg.delays.get("intra", 0.1), inter_delay=cfg.delays.get("inter", 0.8))
        self.der_units = der_buses
        self.agents = {}
        for b in self.graph.nodes:
            ders = der_buses.get(b, [])
            self.agents[b] = Agent(
                bus=b, has_der=bool(ders), q_params=cfg.q_params(b), p_params=cfg.p_params(b),
                x_ii=float(net.path_x[b, b]) if net.path_x is not None else net.common_path(b, b, "x"),
                s_cap=sum(d.s_cap for d in ders))
        # observable buses per agent: own cluster members that are metered
        metered = {m.bus: m.kind for m in self.feeder.meters}
        for b in agent_buses:
            metered.setdefault(b, "realtime")
        self.metered = metered
        self.observed = {}
        for a in self.agents:
            obs = set()
            for c in clusters:
                if a in c:
                    obs.update(b for b in c if b in metered and b not in self.agents)
            self.observed[a] = sorted(obs)

    def _build_inference(self):
        realtime = sorted(b for b, k in self.metered.items() if k == "realtime")
        anchors = {}
        for m in self.feeder.meters:
            if m.kind != "sampled":
                continue
            j = m.bus
            local = sorted({b for c in self.clusters if j in c for b in c} & set(realtime))
            pick = select_anchors(self.net, j, local or realtime)
            if pick is not None:
                anchors[j] = pick
        self.inference = VoltageInference(self.net, anchors, self.cfg.inference_reading,
                                          self.cfg.eps_anchor)
        self.inferred = sorted(anchors)
        self.sampled = {m.bus: m for m in self.feeder.meters if m.kind == "sampled"}
        self.vhat = {}

    # -- physics -------------------------------------------------------------

    def _apply_profiles(self, t):
        cfg = self.cfg
        mode = cfg.control_mode
        for bus, ders in self.der_units.items():
            agent = self.agents.get(bus)
            for d in ders:
                avail = d.available(t)
                if mode == "none" or agent is None:
                    d.p_g = min(avail, d.s_cap)
                    d.q_g = -_pf_reactive(d.p_g, cfg.power_factor, d.s_cap)
        if cfg.load_noise > 0:
            self._noise = 1.0 + cfg.load_noise * self.rng.standard_normal(len(self.feeder.loads))
        else:
            self._noise = None

    def _injections(self, t):
        p, q = self.feeder.injections(t)
        if self._noise is not None:
            for ld, k in zip(self.feeder.loads, self._noise):
                pd, qd = ld.at(t)
                p[ld.bus] += (k - 1.0) * pd
                q[ld.bus] += (k - 1.0) * qd
        return p, q

    def _solve(self, t):
        p, q = self._injections(t)
        sol = powerflow.solve(self.net, p, q)
        if not sol.converged:
            raise NotConverged(f"power flow did not converge at t={t:g}", solution=sol,
                               step=self.step_index)
        return sol

    def _meters(self, t, v):
        for j, m in self.sampled.items():
            if m.update(t, v[j]) and j in self.inference.anchors:
                self.inference.record_sample(j, m.last_sample_time, v)
        self.vhat = self.inference.estimate_all(v)

    # -- agents --------------------------------------------------------------

    def _observed_values(self, a, v):
        """``(voltage, bus)`` for the metered non-agent buses in ``a``'s clusters."""
        vals = []
        for b in self.observed[a]:
            x = float(v[b]) if self.metered[b] == "realtime" else self.vhat.get(b, math.nan)
            if not math.isnan(x):
                vals.append((x, b))
        return vals

    def _agent_round(self, a, v, t_avail, now):
        """Pure update of one agent for one round; returns the new agent fields."""
        ag = self.agents[a]
        cfg = self.cfg
        v_i = float(v[a])
        msgs = [ag.inbox[n] for n in self.graph.neighbors[a] if n in ag.inbox]
        nbrs = [m.payload for m in msgs]
        obs = self._observed_values(a, v)
        local = [(v_i, a)] + obs
        ests = [ag.timed]
        for m in msgs:
            pl = m.payload
            ests.append(TimedExtrema(pl.v, m.send_time, pl.v, m.send_time, m.sender, m.sender))
            ests.append(TimedExtrema(pl.v_h, pl.t_h, pl.v_l, pl.t_l, pl.src_h, pl.src_l))
        timed = step_extrema_timed(now, local, ests, cfg.forgetting, self.horizon,
                                   cfg.dt_round)
        extrema = effective_extrema(timed, now, cfg.forgetting, self.horizon, cfg.dt_round)
        mu, xi = compute_margin_violation(extrema, ag.q_params)
        st = ag.state.copy(extrema=extrema, mu=mu, xi=xi)
        st_timed = timed
        nb_v = [pl.v for pl in nbrs] + [x for x, _ in obs]
        st.v_ref = update_vref(v_i, nb_v or [v_i], ag.q_params)
        p_g, q_g = ag.p_g, ag.q_g
        mode = cfg.control_mode
        if mode != "none":
            # reactive consensus stays inside the agent's clusters
            gammas = [m.payload.gamma_q for m in msgs if self.graph.same_cluster(a, m.sender)]
            cps = [pl.c_p for pl in nbrs]
            for _ in range(self.n_sub):
                if mode == "q_and_p":
                    st.c_p, p_g = step_p(st, cps, ag.p_params, cfg.dt_ctrl, t_avail,
                                         has_der=ag.has_der)
                else:
                    p_g = t_avail
                q_cap = q_capacity(ag.s_cap, p_g) if ag.has_der else 0.0
                st.gamma_q, q_g = step_q(st, v_i, gammas, q_cap, ag.x_ii, ag.q_params,
                                         cfg.dt_ctrl)
        return st, st_timed, p_g, q_g

    def _round(self, now, v, avail, pool):
        delivered = self.queue.route(now)
        for msg in delivered:
            if self.debug and msg.deliver_time > now + TIME_EPS:
                raise AssertionError(f"message read before delivery: {msg}")
            self.agents[msg.receiver].inbox[msg.sender] = msg
        order = sorted(self.agents)
        args = [(a, v, avail[a], now) for a in order]
        if pool is None:
            results = [self._agent_round(*x) for x in args]
        else:
            results = list(pool.map(lambda x: self._agent_round(*x), args))
        for a, (st, timed, p_g, q_g) in zip(order, results):
            ag = self.agents[a]
            ag.state, ag.timed, ag.p_g, ag.q_g = st, timed, p_g, q_g
        for a in order:
            ag = self.agents[a]
            tm = ag.timed
            pl = Payload(float(v[a]), tm.v_h, tm.v_l, ag.state.gamma_q, ag.state.c_p,
                         tm.t_h, tm.t_l, tm.src_h, tm.src_l)
            self.queue.broadcast(a, now, pl)

    def _commit(self, t_next):
        mode = self.cfg.control_mode
        if mode == "none":
            return
        for a, ag in self.agents.items():
            ders = self.der_units.get(a)
            if not ders:
                continue
            total_avail = sum(d.available(t_next) for d in ders)
            cp = ag.state.c_p if mode == "q_and_p" else 0.0
            q_cap_tot = q_capacity(ag.s_cap, (1 - cp) * total_avail)
            gamma = ag.state.gamma_q
            for d in ders:
                d.p_g = (1 - cp) * d.available(t_next)
                share = d.s_cap / ag.s_cap if ag.s_cap > 0 else 0.0
                d.q_g = gamma * min(q_capacity(d.s_cap, d.p_g), q_cap_tot * share)
            ag.p_g = (1 - cp) * total_avail
            ag.q_g = sum(d.q_g for d in ders)

    def _avail(self, t):
        return {a: sum(d.available(t) for d in self.der_units.get(a, ())) for a in self.agents}

    def _init_agents(self, v, t):
        avail = self._avail(t)
        for a, ag in self.agents.items():
            ag.state.extrema = ExtremaEstimate(float(v[a]), float(v[a]))
            ag.timed = TimedExtrema(float(v[a]), t, float(v[a]), t, a, a)
            ag.state.v_ref = float(v[a])
            ders = self.der_units.get(a, ())
            ag.p_g = sum(d.p_g for d in ders) if ders else 0.0
            ag.q_g = sum(d.q_g for d in ders) if ders else 0.0
            if self.cfg.control_mode != "none" and ders:
                ag.p_g = avail[a]
                for d in ders:
                    d.p_g, d.q_g = d.available(t), 0.0
                ag.q_g = 0.0

    # -- logging -------------------------------------------------------------

    def _row(self, t, sol):
        v = sol.v
        row = [t, *v]
        for a in self.log.agents:
            ag = self.agents[a]
            s = ag.state
            row += [s.gamma_q, s.c_p, s.gamma_p, s.extrema.v_h, s.extrema.v_l, s.mu, s.xi,
                    ag.p_g, ag.q_g]
        row += [self.vhat.get(j, np.nan) for j in self.log.inferred]
        avail = sum(d.available(t) for d in self.feeder.ders)
        used = sum(d.p_g for d in self.feeder.ders)
        curtail = 100.0 * (avail - used) / avail if avail > 0 else 0.0
        row += [float(v.max()), float(v.min()), curtail, float(sol.p_loss.sum())]
        return row

    # -- driver --------------------------------------------------------------

    def step(self, pool=None):
        cfg = self.cfg
        t = self.step_index * cfg.dt_pf
        self._apply_profiles(t)
        if not self._initialised:
            # DERs start uncontrolled at full output
            self._init_agents(np.ones(self.net.n), t)
        try:
            sol = self._solve(t)
        except NotConverged as exc:
            exc.step = self.step_index
            raise
        v = sol.v
        if not self._initialised:
            self._init_agents(v, t)
            self._initialised = True
        self._meters(t, v)
        avail = self._avail(t)
        for r in range(self.n_rounds):
            self._round(t + r * cfg.dt_round, v, avail, pool)
        self._commit(t + cfg.dt_pf)
        self.solution = sol
        self.log.append(self._row(t, sol))
        self.step_index += 1
        self.t = t

    def run(self) -> RunResult:
        cfg = self.cfg
        n_steps = int(round(cfg.duration / cfg.dt_pf))
        pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
        try:
            while self.step_index < n_steps:
                try:
                    self.step(pool)
                except NotConverged as exc:
                    self.log.aborted = True
                    exc.log = self.log
                    raise
        finally:
            if pool is not None:
                pool.shutdown()
        return RunResult(self.log, self.summary(), self.feeder, self.agents, self.graph,
                         self.queue, self.solution)

    def summary(self) -> dict:
        lg = self.log
        if not lg.rows:
            return {}
        der_agents = [a for a in sorted(self.agents) if self.agents[a].has_der]
        gq_gaps = {}
        for cid, c in enumerate(self.clusters):
            vals = [self.agents[a].state.gamma_q for a in c if a in der_agents]
            if vals:
                gq_gaps[str(cid)] = max(vals) - min(vals)
        cps = [self.agents[a].state.c_p for a in sorted(self.agents)]
        mus = [self.agents[a].state.mu for a in der_agents]
        xis = [self.agents[a].state.xi for a in der_agents]
        return {
            "feeder": self.feeder.name,
            "control_mode": self.cfg.control_mode,
            "seed": self.cfg.seed,
            "steps": len(lg),
            "t_final": lg.rows[-1][0],
            "aborted": lg.aborted,
            "v_max": lg.last("vmax"),
            "v_min": lg.last("vmin"),
            "curtailment_pct": lg.last("curtail_pct"),
            "p_loss": lg.last("p_loss"),
            "c_p_mean": float(np.mean(cps)) if cps else 0.0,
            "c_p_gap": (max(cps) - min(cps)) if cps else 0.0,
            "gamma_q_gap": gq_gaps,
            "gamma_q_gap_max": max(gq_gaps.values()) if gq_gaps else 0.0,
            "mu_max": max(mus) if mus else 0.0,
            "xi_max": max(xis) if xis else 0.0,
            "messages_sent": self.queue.sent,
            "messages_delivered": self.queue.delivered,
            "inference_fallbacks": sorted(self.inference.fallbacks),
        }


def _pf_reactive(p_g, pf, s_cap):
    """Reactive magnitude for a fixed power factor, clipped to the inverter rating."""
    if pf >= 1.0:
        return 0.0
    q = p_g * math.tan(math.acos(pf))
    return min(q, q_capacity(s_cap, p_g))


def run(config: ScenarioConfig, feeder: Feeder | None = None, debug=False, trace=False,
        out_dir=None) -> RunResult:
    """Run a scenario and optionally write ``timeseries.csv``/``summary.json``."""
    sim = Simulation(config, feeder=feeder, debug=debug, trace=trace)
    try:
        result = sim.run()
    except NotConverged:
        if out_dir is not None:
            write_outputs(sim.log, sim.summary(), out_dir, sim.queue if trace else None)
        raise
    if out_dir is not None:
        write_outputs(result.log, result.summary, out_dir, result.queue if trace else None)
    return result


def write_outputs(log_, summary, out_dir, queue=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_.write_csv(out / "timeseries.csv")
    with open(out / "summary.json", "w", newline="\n") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True, default=float)
        fh.write("\n")
    if queue is not None and queue.trace is not None:
        with open(out / "messages.ndjson", "w", newline="\n") as fh:
            queue.dump_trace(fh)
    return os.fspath(out)
