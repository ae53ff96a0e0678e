import numpy as np
import pytest

from islandgrid.network import (Line, Load, NetworkError, NetworkModel, NetworkState,
                                bus_voltages, common_frequency, kcl_bus_voltages, kcl_matrix,
                                network_derivative, pick_leader, scale_load, set_breaker)

W = 2 * np.pi * 50


def _two_bus(**kw):
    return NetworkModel(buses=("B1", "B2"), lines=(Line("L1", "B1", "B2", 0.23, 318e-6),),
                        loads=(Load("Ld", "B2", 4.0, 9.6e-3),), dg_buses=("B1",),
                        dg_closed=(True,), **kw)


def test_virtual_resistor_formula():
    net = _two_bus()
    st = NetworkState(np.array([[8.0, 0.0]]), np.zeros((1, 2)))
    v = bus_voltages(net, st, [(10.0, 0.0)])
    np.testing.assert_allclose(v[0], (2000.0, 0.0))


def test_load_branch_fixed_point():
    # zero derivative of an isolated RL branch under constant bus voltage
    R, L = 4.0, 9.6e-3
    vd, vq = 311.0, 0.0
    den = R ** 2 + (W * L) ** 2
    i = np.array([(R * vd + W * L * vq) / den, (R * vq - W * L * vd) / den])
    net = _two_bus()
    st = NetworkState(np.zeros((1, 2)), i[None, :], omega_com=W)
    _, d_loads = network_derivative(net, st, np.array([[0.0, 0.0], [vd, vq]]))
    np.testing.assert_allclose(d_loads[0], 0.0, atol=1e-9)


def test_kcl_projection_rate():
    # d/dt of the net injection equals -kappa times the injection
    net = _two_bus(kappa=500.0)
    rng = np.random.default_rng(3)
    st = NetworkState(rng.normal(size=(1, 2)) * 10, rng.normal(size=(1, 2)) * 10, omega_com=W)
    i_dg = rng.normal(size=(1, 2)) * 10
    v_dg = np.array([[311.0, 5.0]])
    R_c, L_c = np.array([0.02]), np.array([2e-3])
    v = kcl_bus_voltages(net, st, i_dg, v_dg, R_c, L_c)
    d_lines, d_loads = network_derivative(net, st, v)
    vb = v[0]
    d_dg = np.array([(-R_c[0] * i_dg[0, 0] + v_dg[0, 0] - vb[0]) / L_c[0] + W * i_dg[0, 1],
                     (-R_c[0] * i_dg[0, 1] + v_dg[0, 1] - vb[1]) / L_c[0] - W * i_dg[0, 0]])
    r1 = i_dg[0] - st.line_currents[0]
    dr1 = d_dg - d_lines[0]
    np.testing.assert_allclose(dr1, -500.0 * r1, rtol=1e-9, atol=1e-9)
    r2 = st.line_currents[0] - st.load_currents[0]
    np.testing.assert_allclose(d_lines[0] - d_loads[0], -500.0 * r2, rtol=1e-9, atol=1e-9)


def test_kcl_matrix_idle_bus():
    net = NetworkModel(buses=("B1", "B2", "B3"), lines=(Line("L1", "B1", "B2", 0.1, 1e-3),),
                       loads=(Load("Ld", "B3", 4.0, 9.6e-3, connected=False),),
                       dg_buses=("B1",), dg_closed=(True,))
    m = kcl_matrix(net, [2e-3])
    assert m[2, 2] == 1.0 and not m[2, :2].any()
    np.testing.assert_allclose(m, m.T)


def test_breakers_and_load_scaling():
    net = _two_bus()
    assert set_breaker(net, "DG1", True) is net
    opened = set_breaker(net, "Ld", False)
    assert not opened.loads[0].connected and net.loads[0].connected
    half = scale_load(net, "Ld", 2.0)
    assert half.loads[0].R == 2.0 and half.loads[0].L == pytest.approx(4.8e-3)
    with pytest.raises(NetworkError, match="unknown breaker"):
        set_breaker(net, "nope", True)
    with pytest.raises(NetworkError, match="> 0"):
        scale_load(net, "Ld", 0.0)


def test_validation_errors():
    with pytest.raises(NetworkError, match="unknown bus"):
        NetworkModel(buses=("B1",), lines=(Line("L1", "B1", "B9", 0.1, 1e-3),), loads=(),
                     dg_buses=("B1",), dg_closed=(True,))
    with pytest.raises(NetworkError, match="not connected"):
        NetworkModel(buses=("B1", "B2"), lines=(), loads=(), dg_buses=("B1", "B2"),
                     dg_closed=(True, True))
    with pytest.raises(NetworkError, match="method"):
        _two_bus(method="dense")


def test_leader_fallback():
    assert pick_leader([True, True], 0) == 0
    assert pick_leader([False, True, True], 0) == 1
    assert common_frequency([310.0, 314.0, 316.0], 0, [False, True, True]) == 314.0
    with pytest.raises(NetworkError):
        pick_leader([False, False])
