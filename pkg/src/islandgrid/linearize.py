"""Feedback linearization of the v_od channel.

The output ``h = v_od`` has relative degree two with respect to ``V_n``:

    d²v_od/dt² = L_F²h + L_G L_F h · V_n

The drift term is what the observer lumps into the extended state; the input
gain is constant for a given parameter set.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .plant import DGParams, DGState


@dataclass(frozen=True)
class LinearizedOutputs:
    y1: float
    y2: float
    z: float = 0.0


@dataclass(frozen=True)
class ExtendedModel:
    g0: float
    A_ex: np.ndarray = field(init=False, repr=False)
    B_ex: np.ndarray = field(init=False, repr=False)
    C_ex: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (np.isfinite(self.g0) and self.g0 > 0):
            raise ValueError(f"g0 must be finite and > 0, got {self.g0}")
        a = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
        b = np.array([0.0, self.g0, 0.0])
        c = np.array([1.0, 0.0, 0.0])
        for m in (a, b, c):
            m.setflags(write=False)
        object.__setattr__(self, "A_ex", a)
        object.__setattr__(self, "B_ex", b)
        object.__setattr__(self, "C_ex", c)

    @classmethod
    def from_params(cls, params: DGParams) -> "ExtendedModel":
        return cls(lie_lg_lf_h(params))


def lie_lf2_h(params: DGParams, state: DGState, bus_v_d, omega_i) -> float:
    """Drift part of d²v_od/dt² with the droop frequency held fixed."""
    return float(K.lie_lf2_h(params.as_array(), state.as_array(), float(bus_v_d), float(omega_i)))


def lie_lg_lf_h(params: DGParams) -> float:
    return params.K_Pc * params.K_Pv / (params.C_f * params.L_f)


def vdot_od(params: DGParams, state: DGState, omega_i) -> float:
    return float(omega_i) * state.v_oq + (state.i_ld - state.i_od) / params.C_f


def invert_input(z, xi_hat, g0, v_max=2 * 311.0):
    """Droop reference realizing the virtual input ``z``.

    Returns ``(u, saturated)`` with ``u`` clamped to ``[0, v_max]``.
    """
    if not g0 > 0:
        raise ValueError(f"g0 must be > 0, got {g0}")
    u = (z - xi_hat) / g0
    u_c = min(max(u, 0.0), v_max)
    return u_c, u_c != u


def ground_truth_xi(params_plant: DGParams, params_nominal: DGParams, state: DGState,
                    bus_v_d, omega_i, u) -> float:
    """Extended state seen by a controller built on nominal parameters.

    ``xi = L_F²h + (g_plant - g0) * u``; used only to score the observer.
    """
    dg = lie_lg_lf_h(params_plant) - lie_lg_lf_h(params_nominal)
    return lie_lf2_h(params_plant, state, bus_v_d, omega_i) + dg * float(u)
