"""Branch-flow power flow for radial networks.

Conventions: ``p``/``q`` are net bus *consumption* (load minus DER output),
``p_s``/``q_s`` the receiving-end power delivered to bus ``i`` through its
segment, ``ell`` the squared segment current.  All arrays are indexed by bus
with index 0 (feeder head) carrying zeros for segment quantities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NotConverged, UnknownBus, VoltageCollapse
from .network import RadialNetwork

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100


@dataclass
class PowerFlowSolution:
    v: np.ndarray
    p_s: np.ndarray
    q_s: np.ndarray
    ell: np.ndarray
    p_loss: np.ndarray
    q_loss: np.ndarray
    converged: bool
    iterations: int
    max_residual: float
    p: np.ndarray
    q: np.ndarray
    network: RadialNetwork | None = field(default=None, repr=False)

    @property
    def v2(self):
        return self.v**2

    @property
    def head_power(self) -> tuple[float, float]:
        """Real and reactive power drawn from the feeder head (bus 0)."""
        return head_power(self.network, self)


def _children_matrix(net: RadialNetwork):
    rows = net.parent[1:]
    cols = np.arange(1, net.n)
    return sp.csr_matrix((np.ones(net.n - 1), (rows, cols)), shape=(net.n, net.n))


def _strict_subtree(net: RadialNetwork):
    return net.subtree - sp.diags(np.r_[0.0, np.ones(net.n - 1)])


def residuals(net: RadialNetwork, sol: PowerFlowSolution) -> dict[str, np.ndarray]:
    """Per-segment residuals of the four branch-flow equations.

    Keys ``"a"``..``"d"``: real and reactive power balance at the receiving
    bus, voltage drop over the segment, and the current/power identity.
    """
    cm = _children_matrix(net)
    par = net.parent[1:]
    i = np.arange(1, net.n)
    v2 = sol.v**2
    ra = sol.p_s - sol.p - cm @ (sol.p_s + net.r * sol.ell)
    rb = sol.q_s - sol.q - cm @ (sol.q_s + net.x * sol.ell)
    rc = np.zeros(net.n)
    rc[1:] = v2[par] - v2[i] - 2 * (net.r[i] * sol.p_s[i] + net.x[i] * sol.q_s[i]) - net.z2[i] * sol.ell[i]
    rd = v2 * sol.ell - sol.p_s**2 - sol.q_s**2
    out = {"a": ra, "b": rb, "c": rc, "d": rd}
    for k in out:
        out[k][0] = 0.0
    return out


def max_residual(net, sol) -> float:
    return float(max(np.max(np.abs(r)) for r in residuals(net, sol).values()))


def solve(net: RadialNetwork, p, q, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
          raise_on_fail=False, v0=None) -> PowerFlowSolution:
    """Backward/forward sweep on the branch-flow equations.

    The backward pass aggregates subtree consumption plus downstream segment
    losses into the receiving-end flows; the forward pass accumulates the
    exact squared-voltage drop from the feeder head.  Iterates on the squared
    currents from a flat start until every branch-flow residual is below
    ``tol``.

    Returns the solution with ``converged=False`` when ``max_iter`` is hit,
    unless ``raise_on_fail`` is set, in which case :class:`NotConverged`
    carries it.  Raises :class:`VoltageCollapse` if a squared voltage goes
    non-positive.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (net.n,) or q.shape != (net.n,):
        raise ValueError(f"injections must have shape ({net.n},)")
    v0 = net.v0 if v0 is None else float(v0)
    sub = net.subtree
    strict = _strict_subtree(net)
    sub_t = sub.T.tocsr()
    p_agg = sub @ p
    q_agg = sub @ q

    ell = np.zeros(net.n)
    sol = None
    for it in range(1, max_iter + 1):
        p_s = p_agg + strict @ (net.r * ell)
        q_s = q_agg + strict @ (net.x * ell)
        drop = 2 * (net.r * p_s + net.x * q_s) + net.z2 * ell
        v2 = v0 * v0 - sub_t @ drop
        if np.any(v2 <= 0):
            bad = int(np.flatnonzero(v2 <= 0)[0])
            raise VoltageCollapse(f"squared voltage at bus {bad} is {v2[bad]:.4g} (iteration {it})")
        ell = (p_s**2 + q_s**2) / v2
        ell[0] = 0.0
        sol = _pack(net, v2, p_s, q_s, ell, p, q, it)
        if sol.max_residual < tol:
            sol.converged = True
            return sol
    if raise_on_fail:
        raise NotConverged(
            f"power flow did not converge in {max_iter} iterations "
            f"(max residual {sol.max_residual:.3g})",
            solution=sol,
        )
    return sol


def _pack(net, v2, p_s, q_s, ell, p, q, it):
    p_s = p_s.copy()
    q_s = q_s.copy()
    p_s[0] = q_s[0] = 0.0
    sol = PowerFlowSolution(
        v=np.sqrt(v2),
        p_s=p_s,
        q_s=q_s,
        ell=ell,
        p_loss=net.r * ell,
        q_loss=net.x * ell,
        converged=False,
        iterations=it,
        max_residual=np.inf,
        p=p,
        q=q,
        network=net,
    )
    sol.max_residual = max_residual(net, sol)
    return sol


def head_power(net: RadialNetwork, sol: PowerFlowSolution) -> tuple[float, float]:
    # segments leaving bus 0 carry their sending-end power p_s + r*ell
    kids = sorted(net.children[0])
    ps = sum(sol.p_s[m] + sol.p_loss[m] for m in kids) + sol.p[0]
    qs = sum(sol.q_s[m] + sol.q_loss[m] for m in kids) + sol.q[0]
    return float(ps), float(qs)


def loss_coefficients(net: RadialNetwork, literal=False) -> np.ndarray:
    """Coefficient matrix ``C`` with ``V_k^2 = V_0^2 - 2RP - 2XQ - C @ P_L``.

    ``literal=True`` returns ``2 * path_zp`` as printed in the closed-form
    model.  The default is the coefficient obtained by summing the exact
    per-segment voltage drop along the path; it differs from the literal
    form by ``(R_i + b_i X_i)`` on every segment of the path to ``k``
    (added strictly below ``i``, subtracted at ``k == i``).
    """
    zp = np.asarray(net.path_zp)
    c = 2.0 * zp
    if literal:
        return c
    self_term = net.r + net.b * net.x
    eye = np.eye(net.n)
    below = net.on_path_matrix() - eye  # k strictly below segment i
    return c + (below - eye) * self_term[None, :]


def eval_der_explicit_voltage(net: RadialNetwork, sol: PowerFlowSolution, p, q,
                              literal=False) -> np.ndarray:
    """Squared voltages from the closed-form DER-explicit model.

    ``p``/``q`` are the net consumption arrays (``-P_g + P_d``); losses come
    from ``sol``.  Used as a cross-check of :func:`solve`.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    p_in = p.copy()
    q_in = q.copy()
    p_in[0] = q_in[0] = 0.0
    c = loss_coefficients(net, literal=literal)
    v2 = net.v0**2 - 2 * net.path_r @ p_in - 2 * net.path_x @ q_in - c @ sol.p_loss
    v2[0] = net.v0**2
    return v2


def eval_segment_loss(net: RadialNetwork, sol: PowerFlowSolution, k) -> float:
    """Loss on segment ``parent(k) -> k`` from subtree aggregation.

    Evaluates ``R_k / V_k^2 * (Ps^2 + Qs^2)`` where the flows are rebuilt from
    the bus injections of ``k`` and its descendants and the descendants'
    losses, so it only agrees with ``sol.p_loss[k]`` at a consistent point.
    """
    k = net.check_bus(k)
    if k == 0:
        raise UnknownBus("bus 0 owns no segment")
    below = sorted(net.descendants[k])
    ps = sol.p[k] + sum(sol.p[m] + sol.p_loss[m] for m in below)
    qs = sol.q[k] + sum(sol.q[m] + net.b[m] * sol.p_loss[m] for m in below)
    return float(net.r[k] / sol.v[k] ** 2 * (ps * ps + qs * qs))


def segment_drop_residual(net: RadialNetwork, sol: PowerFlowSolution,
                          subset="descendants") -> np.ndarray:
    """Residual of the injection-explicit squared-voltage drop per segment.

    ``V_parent^2 - V_i^2 = 2 sum_m (R_i P_m + X_i Q_m)
    + 2 sum_m' (R_i + b_m' X_i) P_L,m' + (R_i + b_i X_i) P_L,i``

    where ``m`` runs over ``i`` and the ``subset`` of buses below ``i`` and
    ``m'`` over that subset.  With ``subset="children"`` the sums stop one
    level down, which is only exact when every child is a leaf.
    """
    out = np.zeros(net.n)
    v2 = sol.v**2
    for i in range(1, net.n):
        below = net.descendants[i] if subset == "descendants" else net.children[i]
        ms = [i, *below]
        rhs = 2 * sum(net.r[i] * sol.p[m] + net.x[i] * sol.q[m] for m in ms)
        rhs += 2 * sum((net.r[i] + net.b[m] * net.x[i]) * sol.p_loss[m] for m in below)
        rhs += (net.r[i] + net.b[i] * net.x[i]) * sol.p_loss[i]
        out[i] = v2[net.parent[i]] - v2[i] - rhs
    return out
