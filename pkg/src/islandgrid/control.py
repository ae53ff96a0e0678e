"""Distributed fast-terminal-sliding-mode voltage consensus.

Each DG builds neighbourhood tracking errors from its own and its neighbours'
estimated ``(v_od, dv_od/dt)``, forms the sliding variable ``s`` and produces a
virtual input ``z`` (a commanded ``d²v_od/dt²``).  The pointwise law couples
``z_i`` to the neighbours' ``z_j``; :func:`solve_consensus_z` resolves that
coupling for all DGs at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .graph import CommGraph

EPS_E1 = 1e-6


class ControlError(ValueError):
    pass


def _odd(k):
    return isinstance(k, (int, np.integer)) and k > 0 and k % 2 == 1


@dataclass(frozen=True)
class FtsmParams:
    c: float = 600.0
    m: int = 13
    n: int = 11
    d: float = 100.0
    p: int = 3
    q: int = 5
    alpha: float = 100.0
    beta: float = 400.0
    boundary_layer: float = 1.0
    c_q: float = 600.0
    m1: int = 13
    n1: int = 11
    d_q: float = 100.0
    p1: int = 3
    q1: int = 5
    eps: float = EPS_E1

    def __post_init__(self):
        for name in ("m", "n", "p", "q", "m1", "n1", "p1", "q1"):
            if not _odd(getattr(self, name)):
                raise ControlError(f"{name} must be a positive odd integer, got {getattr(self, name)!r}")
        if not self.m > self.n:
            raise ControlError(f"need m > n, got m={self.m}, n={self.n}")
        if not self.p < self.q:
            raise ControlError(f"need p < q, got p={self.p}, q={self.q}")
        if not self.m1 > self.n1:
            raise ControlError(f"need m1 > n1, got m1={self.m1}, n1={self.n1}")
        if not self.p1 < self.q1:
            raise ControlError(f"need p1 < q1, got p1={self.p1}, q1={self.q1}")
        for name in ("c", "d", "alpha", "beta", "c_q", "d_q", "eps"):
            if not getattr(self, name) > 0:
                raise ControlError(f"{name} must be > 0, got {getattr(self, name)!r}")
        if self.boundary_layer < 0:
            raise ControlError("boundary_layer must be >= 0")


@dataclass(frozen=True)
class NeighborMsg:
    sender: int
    y1_hat: float
    y2_hat: float
    z: float = 0.0
    nq_times_q: float = 0.0
    stale: bool = False
    timestamp: float = 0.0


@dataclass(frozen=True)
class ReferenceSignal:
    y0: float = 311.0

    @property
    def y0_dot(self) -> float:
        return 0.0


def spow(x, a):
    """Signed power ``sgn(x)·|x|**a``; works on scalars and arrays."""
    if not a > 0:
        raise ControlError(f"exponent must be > 0, got {a}")
    return np.sign(x) * np.abs(x) ** a


def _sat(s, phi):
    if phi > 0:
        return np.clip(s / phi, -1.0, 1.0)
    return np.sign(s)


def tracking_errors(graph: CommGraph, i, y1_hat, y2_hat, msgs, ref=ReferenceSignal()):
    """Local neighbourhood errors ``(e1, e2)``; stale messages are ignored."""
    e1 = graph.pinning[i] * (y1_hat - ref.y0)
    e2 = graph.pinning[i] * (y2_hat - ref.y0_dot)
    for msg in msgs:
        a = graph.adjacency[i, msg.sender]
        if a > 0 and not msg.stale:
            e1 += a * (y1_hat - msg.y1_hat)
            e2 += a * (y2_hat - msg.y2_hat)
    return e1, e2


def ftsm_surface(params: FtsmParams, e1, e2):
    return (e2 + params.c * spow(e1, params.m / params.n)
            + params.d * spow(e1, params.p / params.q))


def tradeoff_surface(params: FtsmParams, e1, e2, e_q):
    return (ftsm_surface(params, e1, e2) + params.c_q * spow(e_q, params.m1 / params.n1)
            + params.d_q * spow(e_q, params.p1 / params.q1))


def compensation(params: FtsmParams, e1, e2):
    """Derivative of the attractor terms times ``e2``.

    With odd-integer exponents both ``e1**(m/n-1)`` and ``e1**(p/q-1)`` are
    even functions, hence the magnitudes; ``|e1|`` is floored at ``eps``
    because the second exponent is negative.
    """
    a = np.maximum(np.abs(e1), params.eps)
    return (params.c * params.m / params.n * a ** (params.m / params.n - 1.0)
            + params.d * params.p / params.q * a ** (params.p / params.q - 1.0)) * e2


def reaching(params: FtsmParams, s):
    """Continuous-time reaching law ``-alpha·sig(s)^2 - beta·sat(s/phi)``."""
    return -params.alpha * spow(s, 2.0) - params.beta * _sat(s, params.boundary_layer)


@njit(cache=True)
def _flow(s0, alpha, beta, phi, t):
    # exact solution of ds/dt = -alpha*s|s| - beta*sat(s/phi) after time t
    if s0 == 0.0:
        return 0.0
    sg = 1.0 if s0 > 0 else -1.0
    s = abs(s0)
    if phi <= 0.0 or s > phi:
        r = math.sqrt(beta / alpha)
        w = math.sqrt(alpha * beta)
        th = math.atan(s / r)
        edge = phi if phi > 0.0 else 0.0
        t_hit = (th - math.atan(edge / r)) / w
        if t_hit >= t:
            return sg * r * math.tan(th - w * t)
        if phi <= 0.0:
            return 0.0
        t -= t_hit
        s = edge
    k = beta / phi
    e = math.exp(-k * t)
    return sg * s * e / (1.0 + alpha * s / k * (1.0 - e))


@njit(cache=True)
def _flow_batch(s, alpha, beta, phi, t, out):
    for i in range(s.shape[0]):
        out[i] = (_flow(s[i], alpha, beta, phi, t) - s[i]) / t


def reaching_flow(params: FtsmParams, s, period):
    """Sampled-data reaching term.

    Returns the constant rate that moves ``s`` over one control period to
    where the continuous reaching law would take it.  Holding the pointwise
    law over a period overshoots once ``alpha·|s|·period`` is of order one.
    """
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    out = np.empty_like(s_arr)
    _flow_batch(s_arr, float(params.alpha), float(params.beta),
                float(params.boundary_layer), float(period), out)
    return out if np.ndim(s) else float(out[0])


def ftsm_law(graph: CommGraph, i, params: FtsmParams, s, e1, e2, neighbor_z, reach=None):
    """Pointwise virtual input of DG ``i``.

    ``neighbor_z`` maps neighbour index to its published ``z``.  ``reach``
    overrides the continuous reaching term (for example with
    :func:`reaching_flow`).
    """
    a = graph.adjacency[i]
    gain = a.sum() + graph.pinning[i]
    coupled = sum(a[j] * zj for j, zj in neighbor_z.items())
    r = reaching(params, s) if reach is None else reach
    return (coupled + r - compensation(params, e1, e2)) / gain


def solve_consensus_z(lbar, w):
    """Virtual inputs satisfying every DG's law simultaneously.

    Each law reads ``(d_i + b_i) z_i - Σ a_ij z_j = w_i``, i.e. ``L̄ z = w``;
    iterating the neighbour exchange to convergence reaches the same point.
    """
    return np.linalg.solve(lbar, w)


def baseline_law(graph: CommGraph, i, gains, e1, e2, neighbor_z):
    """Linear cooperative law used as a convergence-rate comparator."""
    k1, k2 = gains
    if not (k1 > 0 and k2 > 0):
        raise ControlError("baseline gains must be > 0")
    a = graph.adjacency[i]
    coupled = sum(a[j] * zj for j, zj in neighbor_z.items())
    return (coupled - k1 * e1 - k2 * e2) / (a.sum() + graph.pinning[i])


def lyapunov_diag(s) -> float:
    s = np.asarray(s, dtype=float)
    return 0.5 * float(np.dot(s, s))
