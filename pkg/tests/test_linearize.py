import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from islandgrid.linearize import (ExtendedModel, ground_truth_xi, invert_input, lie_lf2_h,
                                  lie_lg_lf_h, vdot_od)
from islandgrid.plant import OMEGA_B, TABLE_I, DGState, Perturbation, dg_derivative, droop_setpoints

DG1 = TABLE_I["DG1"]


def test_input_gain_table_values():
    assert lie_lg_lf_h(DG1) == pytest.approx(8.274e6, rel=1e-3)
    assert lie_lg_lf_h(TABLE_I["DG3"]) / lie_lg_lf_h(DG1) == pytest.approx(15 * 0.1 / (10.5 * 0.05))


def test_drift_unit_v_od():
    got = lie_lf2_h(DG1, DGState(v_od=1.0), 0.0, 0.0)
    expected = -(DG1.K_Pc * DG1.K_Pv + 1) / (DG1.C_f * DG1.L_f) - 1 / (DG1.C_f * DG1.L_c)
    assert got == pytest.approx(expected, rel=1e-12)


def test_vdot_unit_current():
    assert vdot_od(DG1, DGState(i_ld=4.7e-5), 0.0) == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-300, 300), min_size=13, max_size=13), st.floats(280, 330),
       st.floats(-30, 30))
def test_vdot_matches_plant_derivative(vals, u, vbd):
    x = DGState.from_array(vals)
    omega = droop_setpoints(DG1, x)[0]
    d = dg_derivative(DG1, x, u, (vbd, 0.0), OMEGA_B)
    assert vdot_od(DG1, x, omega) == d[9]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-300, 300), min_size=13, max_size=13), st.floats(280, 330),
       st.floats(-30, 30), st.floats(-30, 30))
def test_second_derivative_matches_directional_difference(vals, u, vbd, vbq):
    # with frequency and bus voltage frozen, d/dt v_od' is the drift plus g0*u
    x = DGState.from_array(vals)
    omega = droop_setpoints(DG1, x)[0]
    f = dg_derivative(DG1, x, u, (vbd, vbq), OMEGA_B)
    h = 1e-7
    xp = DGState.from_array(x.as_array() + h * f)
    xm = DGState.from_array(x.as_array() - h * f)
    fd = (vdot_od(DG1, xp, omega) - vdot_od(DG1, xm, omega)) / (2 * h)
    an = lie_lf2_h(DG1, x, vbd, omega) + lie_lg_lf_h(DG1) * u
    assert an == pytest.approx(fd, rel=1e-6, abs=1e-3 * DG1.g0 * 1e-6 + 1.0)


def test_invert_input_saturates():
    g0 = lie_lg_lf_h(DG1)
    u, sat = invert_input(1e10, 0.0, g0)
    assert u == 622.0 and sat
    u, sat = invert_input(g0 * 311.0 + 5.0, 5.0, g0)
    assert u == pytest.approx(311.0) and not sat
    with pytest.raises(ValueError):
        invert_input(1.0, 0.0, 0.0)


def test_extended_state_absorbs_gain_mismatch():
    plant = DG1.perturbed(Perturbation({"C_f": 0.8}))
    x = DGState(v_od=300.0, i_ld=20.0, i_od=18.0, Q=1000.0)
    xi = ground_truth_xi(plant, DG1, x, 290.0, OMEGA_B, 1.0)
    assert xi - lie_lf2_h(plant, x, 290.0, OMEGA_B) == pytest.approx(DG1.g0 * (1 / 0.8 - 1))


def test_extended_model_matrices():
    m = ExtendedModel.from_params(DG1)
    np.testing.assert_array_equal(m.A_ex, [[0, 1, 0], [0, 0, 1], [0, 0, 0]])
    assert m.B_ex[1] == DG1.g0 and m.C_ex.tolist() == [1, 0, 0]
    with pytest.raises(ValueError):
        ExtendedModel(-1.0)
