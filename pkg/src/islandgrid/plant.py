"""Large-signal model of one grid-forming inverter with droop control.

Each DG carries 13 states: frame angle, filtered powers, the voltage- and
current-loop integrators, the LC filter and the coupling-branch currents.
The inner loops are the usual cascaded dq PI structure with decoupling
feedforward and no output-current feedforward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import _kernels as K

OMEGA_B = 2.0 * math.pi * 50.0
V_REF = 311.0

_PARAM_NAMES = ("m_P", "n_Q", "omega_c", "R_f", "L_f", "C_f", "R_c", "L_c",
                "K_Pv", "K_Iv", "K_Pc", "K_Ic", "omega_b")
STATE_NAMES = ("delta", "P", "Q", "phi_d", "phi_q", "gamma_d", "gamma_q",
               "i_ld", "i_lq", "v_od", "v_oq", "i_od", "i_oq")


class PlantError(ValueError):
    pass


@dataclass(frozen=True)
class DGParams:
    m_P: float
    n_Q: float
    K_Pv: float
    K_Iv: float
    K_Pc: float
    K_Ic: float
    R_f: float = 0.1
    L_f: float = 1.35e-3
    C_f: float = 47e-6
    R_c: float = 0.02
    L_c: float = 2e-3
    omega_c: float = 31.4
    omega_b: float = OMEGA_B
    omega_n: float = OMEGA_B
    V_n: float = V_REF

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise PlantError(f"DG parameter {f.name} must be finite and > 0, got {v!r}")

    @property
    def g0(self) -> float:
        return self.K_Pc * self.K_Pv / (self.C_f * self.L_f)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in _PARAM_NAMES], dtype=float)

    def perturbed(self, perturbation: "Perturbation") -> "DGParams":
        return replace(self, **{k: getattr(self, k) * v for k, v in perturbation.factors.items()})


TABLE_I = {
    "DG1": DGParams(m_P=6.28e-5, n_Q=0.5e-3, K_Pv=0.05, K_Iv=390.0, K_Pc=10.5, K_Ic=1.6e4),
    "DG2": DGParams(m_P=9.42e-5, n_Q=0.75e-3, K_Pv=0.05, K_Iv=390.0, K_Pc=10.5, K_Ic=1.6e4),
    "DG3": DGParams(m_P=12.56e-5, n_Q=1e-3, K_Pv=0.1, K_Iv=420.0, K_Pc=15.0, K_Ic=2e4),
}
TABLE_I["DG4"] = TABLE_I["DG3"]

_PERTURBABLE = frozenset(("R_f", "L_f", "C_f", "R_c", "L_c"))


@dataclass(frozen=True)
class Perturbation:
    """Multiplicative factors on the plant's physical parameters.

    Controllers and observers keep the nominal values; only the simulated
    plant sees the scaled ones.
    """
    factors: dict

    def __post_init__(self):
        for k, v in self.factors.items():
            if k not in _PERTURBABLE:
                raise PlantError(f"cannot perturb {k!r}; allowed: {sorted(_PERTURBABLE)}")
            if not 0.5 <= float(v) <= 1.5:
                raise PlantError(f"perturbation factor for {k} must be in [0.5, 1.5], got {v}")
        object.__setattr__(self, "factors", {k: float(v) for k, v in self.factors.items()})

    @classmethod
    def identity(cls) -> "Perturbation":
        return cls({})


@dataclass
class DGState:
    delta: float = 0.0
    P: float = 0.0
    Q: float = 0.0
    phi_d: float = 0.0
    phi_q: float = 0.0
    gamma_d: float = 0.0
    gamma_q: float = 0.0
    i_ld: float = 0.0
    i_lq: float = 0.0
    v_od: float = 0.0
    v_oq: float = 0.0
    i_od: float = 0.0
    i_oq: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in STATE_NAMES], dtype=float)

    @classmethod
    def from_array(cls, x) -> "DGState":
        x = np.asarray(x, dtype=float)
        if x.shape != (K.N_DG_STATES,):
            raise PlantError(f"DG state needs {K.N_DG_STATES} entries, got shape {x.shape}")
        return cls(*map(float, x))


def droop_setpoints(params: DGParams, state: DGState, V_n=None):
    """Droop frequency and voltage references ``(omega_i, v_od*, v_oq*)``."""
    V_n = params.V_n if V_n is None else V_n
    return params.omega_n - params.m_P * state.P, V_n - params.n_Q * state.Q, 0.0


def instantaneous_power(state: DGState):
    p = state.v_od * state.i_od + state.v_oq * state.i_oq
    q = state.v_oq * state.i_od - state.v_od * state.i_oq
    return p, q


def dg_derivative(params: DGParams, state: DGState, u, bus_voltage, omega_com,
                  connected=True) -> np.ndarray:
    """Right-hand side of the 13 DG equations.

    ``bus_voltage`` is ``(v_bd, v_bq)`` already rotated into the DG's frame.
    """
    out = np.empty(K.N_DG_STATES)
    K.dg_rhs(params.as_array(), state.as_array(), float(u), params.omega_n,
             float(bus_voltage[0]), float(bus_voltage[1]), float(omega_com), bool(connected), out)
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise FloatingPointError(
            f"non-finite derivative in state {STATE_NAMES[bad[0]]} (index {bad[0]})"
        )
    return out


def local_to_common(delta, vec_dq):
    return np.array(K.rotate(float(delta), float(vec_dq[0]), float(vec_dq[1])))


def common_to_local(delta, vec_DQ):
    return np.array(K.rotate(-float(delta), float(vec_DQ[0]), float(vec_DQ[1])))
