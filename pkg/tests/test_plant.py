import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from islandgrid import _kernels as K
from islandgrid.plant import (OMEGA_B, TABLE_I, DGParams, DGState, Perturbation, PlantError,
                              common_to_local, dg_derivative, droop_setpoints,
                              instantaneous_power, local_to_common)

DG1 = TABLE_I["DG1"]


def test_droop_setpoints_table_values():
    w, vd, vq = droop_setpoints(DG1, DGState(P=40e3, Q=30e3))
    assert w == pytest.approx(OMEGA_B - 2.512)
    assert vd == pytest.approx(311.0 - 15.0)
    assert vq == 0.0


def test_instantaneous_power():
    assert instantaneous_power(DGState(v_od=311.0, i_od=10.0)) == (3110.0, 0.0)


def test_table_values():
    assert TABLE_I["DG3"].K_Pc == 15.0 and TABLE_I["DG4"] == TABLE_I["DG3"]
    assert TABLE_I["DG2"].m_P == 9.42e-5
    assert DG1.g0 == pytest.approx(10.5 * 0.05 / (47e-6 * 1.35e-3))


def test_invalid_params():
    with pytest.raises(PlantError, match="C_f"):
        DGParams(m_P=1e-4, n_Q=1e-3, K_Pv=0.05, K_Iv=390, K_Pc=10.5, K_Ic=1.6e4, C_f=0.0)
    with pytest.raises(PlantError, match="cannot perturb"):
        Perturbation({"K_Pv": 1.1})
    with pytest.raises(PlantError, match=r"\[0.5, 1.5\]"):
        Perturbation({"L_f": 2.0})


def test_perturbation_scales_plant_only():
    p = DG1.perturbed(Perturbation({"C_f": 0.8}))
    assert p.C_f == pytest.approx(0.8 * 47e-6)
    assert DG1.C_f == 47e-6


def _eq13(p, x, omega):
    return omega * x.v_oq + (x.i_ld - x.i_od) / p.C_f


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=13, max_size=13),
       st.floats(250, 350), st.floats(-50, 50), st.floats(-50, 50))
def test_vdot_entry_matches_independent_eq13(vals, u, vbd, vbq):
    x = DGState.from_array(vals)
    d = dg_derivative(DG1, x, u, (vbd, vbq), OMEGA_B)
    omega, _, _ = droop_setpoints(DG1, x)
    assert d[K.VO_D] == pytest.approx(_eq13(DG1, x, omega), rel=1e-12, abs=1e-9)


def test_dg_derivative_hand_terms():
    x = DGState(P=1000.0, v_od=311.0, i_od=5.0, delta=0.1)
    d = dg_derivative(DG1, x, 311.0, (300.0, 0.0), OMEGA_B)
    omega = OMEGA_B - DG1.m_P * 1000.0
    assert d[K.DELTA] == pytest.approx(omega - OMEGA_B)
    assert d[K.PP] == pytest.approx(DG1.omega_c * (311.0 * 5.0 - 1000.0))
    assert d[K.PHI_D] == pytest.approx(311.0 - 311.0)
    assert d[K.IO_D] == pytest.approx((-DG1.R_c * 5.0 + 311.0 - 300.0) / DG1.L_c)


def test_nonfinite_derivative_names_state():
    x = DGState(i_ld=float("inf"))
    with pytest.raises(FloatingPointError, match="i_ld|v_od|gamma"):
        dg_derivative(DG1, x, 311.0, (0.0, 0.0), OMEGA_B)


def test_state_array_roundtrip():
    x = DGState(*[float(i) for i in range(13)])
    assert DGState.from_array(x.as_array()) == x
    with pytest.raises(PlantError):
        DGState.from_array(np.zeros(12))


@given(st.floats(-math.pi, math.pi), st.floats(-400, 400), st.floats(-400, 400))
def test_frame_rotation_roundtrip(delta, a, b):
    back = common_to_local(delta, local_to_common(delta, (a, b)))
    np.testing.assert_allclose(back, (a, b), atol=1e-9)
    assert np.hypot(*local_to_common(delta, (a, b))) == pytest.approx(np.hypot(a, b), abs=1e-9)
