import numpy as np
import pytest

from islandgrid.sim import Metrics, WindowMetrics, check_properties, parse_scenario, run, settling_time

from test_engine import SINGLE


def test_settling_closed_form():
    t = np.arange(0, 1.0, 1e-4)
    v = 311.0 + 5.0 * np.exp(-20.0 * t)
    assert settling_time(t, v, 311.0, 0.0, 1.0) == pytest.approx(np.log(5) / 20, abs=2e-4)


def test_settling_requires_every_column():
    t = np.arange(0, 1.0, 1e-4)
    v = np.column_stack([np.full_like(t, 311.0), 311.0 + 5.0 * np.exp(-20.0 * t)])
    assert settling_time(t, v, 311.0, 0.0, 1.0) == pytest.approx(0.0805, abs=2e-4)
    assert settling_time(t, v[:, 0], 311.0, 0.0, 1.0) == 0.0


def test_never_in_band_and_late_entry():
    t = np.arange(0, 1.0, 1e-4)
    assert settling_time(t, np.full_like(t, 305.0), 311.0, 0.0, 1.0) is None
    # entering the band less than the hold time before the window closes does not count
    v = np.where(t < 0.95, 305.0, 311.0)
    assert settling_time(t, v, 311.0, 0.0, 1.0) is None


def test_single_dg_metrics():
    sc = parse_scenario(SINGLE.replace("duration: 0.3", "duration: 0.5"))
    m = run(sc).metrics
    first, second = m.windows
    assert not first.available and first.label == "start"
    assert second.available and second.label == "activate-secondary"
    assert second.settled
    assert abs(second.ss_mean_error[0]) < 0.2
    assert second.ss_dispersion == 0.0
    assert m.window_at(0.2) is second
    with pytest.raises(KeyError):
        m.window_at(0.6)
    assert check_properties(m) == []


def _window(label, settle, err, available=True):
    return WindowMetrics(0.0, 1.0, label, available, settle, ss_max_abs_error=[err])


def test_check_properties_flags():
    m = Metrics([_window("start", None, 6.0), _window("activate-secondary", 0.05, 0.2),
                 _window("load-connect:Load2", None, 1.5), _window("dg-disconnect:DG4", 0.1, 0.3, False)],
                311.0, covariance_resets=1)
    msgs = check_properties(m)
    assert len(msgs) == 3
    assert "reset" in msgs[0]
    assert "not settled" in msgs[1] and "exceeds" in msgs[2]
    assert check_properties(m, max_error=2.0)[1:] == [msgs[1]]
