"""Voltage sensitivities to DER injections and grid-edge voltage inference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import DegenerateAnchor, SingularSystem
from .network import RadialNetwork
from .powerflow import PowerFlowSolution, loss_coefficients

EPS_ANCHOR = 1e-4
DEFAULT_SAMPLE_PERIOD = 900.0


@dataclass
class SensitivityMatrices:
    """``dv_dp[k, j]`` is dV_k/dP_g,j (likewise for Q); bus-indexed, row/col 0 zero."""

    dv_dp: np.ndarray
    dv_dq: np.ndarray
    mode: str


def lossless_sensitivity(net: RadialNetwork) -> SensitivityMatrices:
    """Loss-free, flat-voltage sensitivities: the common-path matrices themselves."""
    return SensitivityMatrices(np.array(net.path_r), np.array(net.path_x), "lossless")


def _exact_system(net, sol, subtree, factors):
    m = net.n - 1
    idx = np.arange(1, net.n)
    v = sol.v[idx]
    half_c = 0.5 * loss_coefficients(net)[np.ix_(idx, idx)]

    a = np.zeros((2 * m, 2 * m))
    # voltage rows: V_k dV_k + sum_i (c_ki / 2) dPL_i = R_kj (or X_kj)
    a[:m, :m] = np.diag(v)
    a[:m, m:] = half_c
    # loss rows: dPL_i + 2 PL_i/V_i dV_i - 2R_i/V_i^2 sum_{m in T_i} w_im dPL_m = rhs
    a[m:, :m] = np.diag(2.0 * sol.p_loss[idx] / v)
    a[m:, m:] = np.eye(m)
    for row, i in enumerate(idx):
        below = net.descendants[i] if subtree == "descendants" else net.children[i]
        g = 2.0 * net.r[i] / sol.v[i] ** 2
        for mm in below:
            if factors == "segment_i":
                w = sol.p_s[i] + sol.q_s[i] * net.b[mm]
            else:
                w = sol.p_s[mm] + sol.q_s[mm] * net.b[mm]
            a[m + row, m + mm - 1] -= g * w
    return a


def exact_sensitivity_matrices(net: RadialNetwork, sol: PowerFlowSolution,
                               subtree="descendants", factors="segment_i") -> SensitivityMatrices:
    """Sensitivities at an operating point, losses included.

    Differentiates the DER-explicit voltage equation together with the loss
    recursion and solves the coupled linear system for every DER location at
    once.  ``subtree`` picks the bus set coupling a segment's loss to the
    losses below it (``"descendants"`` or ``"children"``); ``factors`` picks
    whether the coupling weights use the flows of the upstream segment
    (``"segment_i"``) or of the downstream one (``"segment_m"``).  The
    defaults are the ones that agree with finite differences of the solver.
    """
    if subtree not in ("descendants", "children"):
        raise ValueError(f"unknown subtree reading {subtree!r}")
    if factors not in ("segment_i", "segment_m"):
        raise ValueError(f"unknown factor reading {factors!r}")
    m = net.n - 1
    idx = np.arange(1, net.n)
    a = _exact_system(net, sol, subtree, factors)
    try:
        lu = sla.lu_factor(a, check_finite=True)
    except (sla.LinAlgError, ValueError) as exc:
        raise SingularSystem(str(exc)) from exc
    if np.min(np.abs(np.diag(lu[0]))) < 1e-14 * np.max(np.abs(a)):
        raise SingularSystem("sensitivity system is singular at this operating point")

    in_sub = net.subtree.toarray()[np.ix_(idx, idx)]  # [i, j] = j in subtree(i)
    g = 2.0 * net.r[idx] / sol.v[idx] ** 2
    out = {}
    for name, path, flow in (("p", net.path_r, sol.p_s), ("q", net.path_x, sol.q_s)):
        rhs = np.vstack([path[np.ix_(idx, idx)], -(g * flow[idx])[:, None] * in_sub])
        x = sla.lu_solve(lu, rhs)
        full = np.zeros((net.n, net.n))
        full[1:, 1:] = x[:m]
        out[name] = full
    return SensitivityMatrices(out["p"], out["q"], "exact")


def exact_sensitivity(net: RadialNetwork, sol: PowerFlowSolution, j,
                      subtree="descendants", factors="segment_i"):
    """Columns ``(dV/dP_g,j, dV/dQ_g,j)`` of the exact sensitivity matrices."""
    j = net.check_bus(j)
    s = exact_sensitivity_matrices(net, sol, subtree=subtree, factors=factors)
    return s.dv_dp[:, j], s.dv_dq[:, j]


# -- meters and inference ---------------------------------------------------

@dataclass
class MeterRecord:
    bus: int
    kind: str = "realtime"
    period: float = 0.0
    last_sample_time: float | None = None
    last_value: float | None = None

    def __post_init__(self):
        if self.kind not in ("realtime", "sampled"):
            raise ValueError(f"unknown meter kind {self.kind!r}")
        if self.kind == "realtime":
            self.period = 0.0
        elif self.period <= 0:
            self.period = DEFAULT_SAMPLE_PERIOD

    def due(self, t) -> bool:
        if self.kind == "realtime" or self.last_sample_time is None:
            return True
        return t >= self.last_sample_time + self.period - 1e-9

    def update(self, t, value) -> bool:
        """Record ``value`` if a sample is due at ``t``; returns whether it was taken."""
        if not self.due(t):
            return False
        if self.kind == "sampled" and self.last_sample_time is not None:
            # snap to the sampling grid so a late call does not drift t_k
            steps = np.floor((t - self.last_sample_time) / self.period + 1e-9)
            t = self.last_sample_time + steps * self.period
        self.last_sample_time = float(t)
        self.last_value = float(value)
        return True


READINGS = ("difference", "verbatim", "l_increment")


def infer_voltage(vi_t, vl_t, vi_k, vl_k, vj_k, reading="difference", eps=EPS_ANCHOR):
    """Estimate an unmetered voltage from two anchors and its last sample.

    ``vi_t``/``vl_t`` are the anchors' current readings, ``*_k`` the values at
    the last sampling instant.  The estimate is

        vi_t + ratio * (vj_k - vi_k)

    with ``ratio = (vl_t - vi_t) / (vl_k - vi_k)`` for ``"difference"``,
    ``(vl_t - vi_k) / (vl_k - vi_k)`` for ``"verbatim"`` and
    ``(vl_t - vl_k) / (vl_k - vi_k)`` for ``"l_increment"``.

    Raises :class:`DegenerateAnchor` when the anchors were closer than
    ``eps`` at the sampling instant.
    """
    den = vl_k - vi_k
    if abs(den) < eps:
        raise DegenerateAnchor(f"anchor spread {den:.3g} below {eps:g}")
    if reading == "difference":
        num = vl_t - vi_t
    elif reading == "verbatim":
        num = vl_t - vi_k
    elif reading == "l_increment":
        num = vl_t - vl_k
    else:
        raise ValueError(f"unknown inference reading {reading!r}")
    return vi_t + num / den * (vj_k - vi_k)


def offset_inference(vi_t, vi_k, vj_k):
    return vi_t + (vj_k - vi_k)


def select_anchors(net: RadialNetwork, j, candidates):
    """Pick anchor buses ``(i, l)`` for inferring bus ``j``.

    Prefers the nearest real-time bus upstream of ``j`` and the nearest one
    downstream.  With anchors on one side only, the two nearest on that side
    are used; with a single collinear anchor ``l`` is ``None`` (offset
    inference).  Without any collinear anchor the electrically nearest
    candidate is returned as an offset anchor.  Returns ``None`` when
    ``candidates`` is empty.
    """
    cands = sorted(set(int(c) for c in candidates) - {j})
    if not cands:
        return None
    up = [c for c in cands if net.is_ancestor(c, j)]
    down = [c for c in cands if net.is_ancestor(j, c)]
    up.sort(key=lambda c: (-net.depth[c], c))
    down.sort(key=lambda c: (net.depth[c], c))
    if up and down:
        return up[0], down[0]
    side = up or down
    if len(side) >= 2:
        return side[0], side[1]
    if side:
        return side[0], None
    pj = set(net.path(j))

    def hops(c):
        pc = net.path(c)
        common = sum(1 for b in pc if b in pj)
        return (len(pc) - common) + (len(pj) - common), c

    return min(cands, key=hops), None


class VoltageInference:
    """Inference bookkeeping for a set of sampled buses.

    Parameters
    ----------
    net : RadialNetwork
    anchors : dict
        ``{j: (i, l)}`` as returned by :func:`select_anchors`.
    """

    def __init__(self, net, anchors, reading="difference", eps=EPS_ANCHOR):
        self.net = net
        self.anchors = dict(anchors)
        self.reading = reading
        self.eps = eps
        self.snapshots = {}  # j -> (t_k, vi_k, vl_k, vj_k)
        self.fallbacks = set()

    def record_sample(self, j, t_k, v):
        """Store the anchor and sampled voltages at the sampling instant of ``j``."""
        i, l = self.anchors[j]
        self.snapshots[j] = (t_k, v[i], v[l] if l is not None else None, v[j])

    def estimate(self, j, v_now) -> float:
        t_k, vi_k, vl_k, vj_k = self.snapshots[j]
        i, l = self.anchors[j]
        if l is None:
            return offset_inference(v_now[i], vi_k, vj_k)
        try:
            return infer_voltage(v_now[i], v_now[l], vi_k, vl_k, vj_k, self.reading, self.eps)
        except DegenerateAnchor:
            self.fallbacks.add(j)
            return offset_inference(v_now[i], vi_k, vj_k)

    def estimate_all(self, v_now) -> dict[int, float]:
        return {j: self.estimate(j, v_now) for j in sorted(self.snapshots)}
