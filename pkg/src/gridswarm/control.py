"""Per-DER agent control laws: cooperative Q control and coordinated P curtailment."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .comms import ExtremaEstimate
from .errors import EmptyNeighborhood


@dataclass(frozen=True)
class QControlParams:
    sigma_v: float = 0.005
    lam: float = 0.5
    k_q: float = 1.0
    beta: float = 50.0
    v_lo: float = 0.95
    v_hi: float = 1.05

    def __post_init__(self):
        if self.sigma_v < 0:
            raise ValueError("sigma_v must be >= 0")
        if not 0 < self.lam <= 1:
            raise ValueError("lam must lie in (0, 1]")
        if self.k_q <= 0 or self.beta <= 0:
            raise ValueError("k_q and beta must be positive")
        if not self.v_lo + self.sigma_v < self.v_hi - self.sigma_v:
            raise ValueError("tightened voltage band is empty")

    @property
    def band(self) -> tuple[float, float]:
        return self.v_lo + self.sigma_v, self.v_hi - self.sigma_v


@dataclass(frozen=True)
class PControlParams:
    k_p: float = 1.0
    beta_p: float = 50.0
    eps_q: float = 0.02

    def __post_init__(self):
        if min(self.k_p, self.beta_p, self.eps_q) <= 0:
            raise ValueError("P-control parameters must be positive")


@dataclass
class AgentState:
    gamma_q: float = 0.0
    c_p: float = 0.0
    v_ref: float = 1.0
    extrema: ExtremaEstimate = field(default_factory=lambda: ExtremaEstimate(1.0, 1.0))
    mu: float = 0.0
    xi: float = 0.0

    @property
    def gamma_p(self) -> float:
        return 1.0 - self.c_p

    def copy(self, **changes):
        return replace(self, **changes)


def deadzone(x, sigma_v):
    return x if abs(x) >= sigma_v else 0.0


def saturate(x, lo, hi):
    if x <= lo:
        return lo
    if x <= hi:
        return x
    return hi


def update_vref(v_i, neighbor_vs, params: QControlParams):
    """Adaptive reference: saturated blend of own voltage and neighbourhood mean."""
    neighbor_vs = list(neighbor_vs)
    if not neighbor_vs:
        raise EmptyNeighborhood("voltage reference needs at least one neighbour")
    mean = math.fsum(neighbor_vs) / len(neighbor_vs)
    lo, hi = params.band
    return saturate(params.lam * v_i + (1 - params.lam) * mean, lo, hi)


def q_capacity(s_cap, p_g):
    return math.sqrt(max(s_cap * s_cap - p_g * p_g, 0.0))


def _projected(value, rate, dt, lo, hi):
    if value >= hi and rate >= 0:
        return hi
    if value <= lo and rate <= 0:
        return lo
    return min(max(value + dt * rate, lo), hi)


def q_rate(gamma, v_i, v_ref, neighbor_gammas, q_cap, x_ii, params: QControlParams):
    consensus = params.k_q * math.fsum(g - gamma for g in neighbor_gammas)
    grad = params.beta * (1 - params.lam) * q_cap * deadzone(v_i - v_ref, params.sigma_v) * x_ii
    return consensus - grad


def step_q(state: AgentState, v_i, neighbor_gammas, q_cap, x_ii, params: QControlParams, dt):
    """One projected-Euler step of the reactive utilisation ratio.

    Returns ``(gamma_q, q_g)``.  Agents without a DER pass ``q_cap=0`` and
    only relay the neighbourhood average of ``gamma_q``.
    """
    h = q_rate(state.gamma_q, v_i, state.v_ref, neighbor_gammas, q_cap, x_ii, params)
    gamma = _projected(state.gamma_q, h, dt, -1.0, 1.0)
    return gamma, gamma * q_cap


def compute_margin_violation(extrema: ExtremaEstimate, params: QControlParams):
    """Network voltage margin ``mu`` and violation index ``xi`` from the extrema."""
    lo, hi = params.band
    mu = min(max(extrema.v_l - lo, 0.0), max(hi - extrema.v_h, 0.0))
    xi = max(max(lo - extrema.v_l, 0.0), max(extrema.v_h - hi, 0.0))
    return mu, xi


def p_rate(state: AgentState, neighbor_cps, params: PControlParams, has_der=True):
    h = params.k_p * math.fsum(c - state.c_p for c in neighbor_cps)
    if has_der:
        headroom = 1 - abs(state.gamma_q)
        h += params.beta_p * max(headroom, params.eps_q) * state.xi
        h -= params.beta_p * min(headroom, params.eps_q) * state.mu
    return h


def step_p(state: AgentState, neighbor_cps, params: PControlParams, dt, p_avail=0.0,
           has_der=True):
    """One projected-Euler step of the curtailment ratio.

    Returns ``(c_p, p_g)`` with ``p_g = (1 - c_p) * p_avail``.  The ratio is
    held on ``[0, 1]``.  Non-DER relays (``has_der=False``) run the consensus
    term only.
    """
    h = p_rate(state, neighbor_cps, params, has_der)
    c = _projected(state.c_p, h, dt, 0.0, 1.0)
    return c, (1.0 - c) * p_avail
