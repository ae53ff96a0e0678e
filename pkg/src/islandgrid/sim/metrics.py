"""Window-based performance metrics computed from a trace.

Event timestamps split the run into windows.  In each window the engine
reports:

* settling time into the ``v_ref ± band`` voltage band;
* steady-state statistics over the final 20% of the window;
* reactive-sharing dispersion;
* observer errors;
* behaviour of the sliding surface and the Lyapunov function.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

BAND = 1.0
HOLD = 0.1
MIN_WINDOW = 0.15
SS_FRACTION = 0.2


@dataclass
class WindowMetrics:
    t0: float
    t1: float
    label: str
    available: bool
    settling_time: float | None = None
    ss_mean_error: list = field(default_factory=list)
    ss_max_abs_error: list = field(default_factory=list)
    ss_std: list = field(default_factory=list)
    ss_dispersion: float | None = None
    ss_dispersion_rel: float | None = None
    min_voltage: float | None = None
    max_voltage: float | None = None
    obs_rmse_rel: dict = field(default_factory=dict)
    lyapunov_violations: int | None = None
    surface_excursions: int | None = None
    reach_time: float | None = None

    @property
    def settled(self) -> bool:
        return self.settling_time is not None


@dataclass
class Metrics:
    windows: list
    v_ref: float
    covariance_resets: int = 0

    def window_at(self, t) -> WindowMetrics:
        for w in self.windows:
            if w.t0 <= t < w.t1:
                return w
        raise KeyError(f"no window contains t={t}")

    def as_dict(self):
        return {"v_ref": self.v_ref, "covariance_resets": self.covariance_resets,
                "windows": [asdict(w) | {"settled": w.settled} for w in self.windows]}


def settling_time(t, v, v_ref, t0, t1, band=BAND, hold=HOLD):
    """First time after ``t0`` from which every column of ``v`` stays in the band for ``hold``.

    Returns the delay since ``t0`` or ``None`` if that never happens before ``t1``.
    """
    t = np.asarray(t)
    v = np.asarray(v)
    if v.ndim == 1:
        v = v[:, None]
    sel = (t >= t0 - 1e-12) & (t < t1 - 1e-12)
    ts = t[sel]
    inside = np.all(np.abs(v[sel] - v_ref) < band, axis=1)
    if ts.size == 0:
        return None
    # start of the last run of in-band samples for every index
    run_start = np.empty(ts.size)
    start = None
    for k in range(ts.size):
        if inside[k]:
            if start is None:
                start = ts[k]
            run_start[k] = start
        else:
            start = None
            run_start[k] = np.nan
    ok = np.flatnonzero(~np.isnan(run_start) & (ts - run_start >= hold - 1e-9))
    if ok.size == 0:
        return None
    return float(run_start[ok[0]] - t0)


def _boundaries(scenario):
    times = sorted({e.time for e in scenario.events if 0.0 < e.time < scenario.duration})
    edges = [0.0] + times + [scenario.duration]
    labels = ["start"]
    for tb in times:
        labels.append("+".join(e.kind + (f":{e.target}" if e.target else "")
                               for e in scenario.events if e.time == tb))
    return list(zip(edges[:-1], edges[1:], labels))


def _rel_rmse(est, truth):
    rms = float(np.sqrt(np.mean(truth ** 2)))
    if rms == 0.0:
        return None
    return float(np.sqrt(np.mean((est - truth) ** 2)) / rms)


def compute_metrics(trace, scenario) -> Metrics:
    if len(trace) == 0:
        raise ValueError("empty trace")
    t = trace["t"]
    v = trace["v_od"]
    conn = trace["connected"] > 0.5
    nqq = trace["Q"] * np.array([p.n_Q for p in scenario.dg_params])
    s = trace["s"]
    V = trace["V"]
    phi = scenario.controller.ftsm.boundary_layer
    v_ref = scenario.v_ref
    act_times = [e.time for e in scenario.events if e.kind == "activate-secondary"]
    windows = []
    for t0, t1, label in _boundaries(scenario):
        sel = (t >= t0 - 1e-12) & (t < t1 - 1e-12)
        if not sel.any():
            continue
        live_cols = np.all(conn[sel], axis=0)
        w = WindowMetrics(t0, t1, label, available=(t1 - t0) >= MIN_WINDOW)
        vc = v[:, live_cols]
        w.settling_time = settling_time(t, vc, v_ref, t0, t1)
        w.min_voltage = float(vc[sel].min())
        w.max_voltage = float(vc[sel].max())
        if w.available:
            ss = sel & (t >= t1 - SS_FRACTION * (t1 - t0) - 1e-12)
            err = v[ss] - v_ref
            nan = np.full(v.shape[1], np.nan)
            w.ss_mean_error = np.where(live_cols, err.mean(axis=0), nan).tolist()
            w.ss_max_abs_error = np.where(live_cols, np.abs(err).max(axis=0), nan).tolist()
            w.ss_std = np.where(live_cols, v[ss].std(axis=0), nan).tolist()
            share = nqq[ss][:, live_cols]
            disp = (share.max(axis=1) - share.min(axis=1)).mean()
            w.ss_dispersion = float(disp)
            w.ss_dispersion_rel = float(disp / np.abs(share.mean()))
            for name, est, truth in (("v_od", "xhat1", "v_od"), ("vdot_od", "xhat2", "vdot_true"),
                                     ("xi", "xhat3", "xi_true")):
                e_ = trace[est][ss][:, live_cols]
                tr = trace[truth][ss][:, live_cols]
                full_e = trace[est][sel][:, live_cols]
                full_t = trace[truth][sel][:, live_cols]
                w.obs_rmse_rel[name] = {
                    "steady": [_rel_rmse(e_[:, j], tr[:, j]) for j in range(e_.shape[1])],
                    "window": [_rel_rmse(full_e[:, j], full_t[:, j]) for j in range(e_.shape[1])],
                }
        if any(a <= t0 + 1e-12 for a in act_times):
            _surface_metrics(w, t[sel], s[sel], V[sel], phi, V[t >= min(act_times) - 1e-12])
        windows.append(w)
    return Metrics(windows, v_ref)


def _surface_metrics(w, t, s, V, phi, V_since_activation):
    # the reaching transient runs from the largest |s| shortly after the event
    # to the first sample back inside the layer
    mag = np.abs(s).max(axis=1)
    band = phi if phi > 0 else 1e-9
    early = np.flatnonzero(t < w.t0 + HOLD)
    peak = int(np.argmax(mag[early])) if early.size else 0
    inside = peak + np.flatnonzero(mag[peak:] < band)
    if inside.size == 0:
        return
    k0 = inside[0]
    w.reach_time = float(t[k0] - w.t0)
    w.surface_excursions = int((mag[k0:] > 2.0 * band).sum())
    tol = 1e-6 * float(V_since_activation[0]) if V_since_activation.size else 0.0
    w.lyapunov_violations = int((np.diff(V[k0:]) > tol).sum())


def check_properties(metrics: Metrics, max_error=BAND, max_settling=0.5):
    """Voltage-restoration violations, one message per failing window.

    Windows that open with the secondary layer already active must settle
    within ``max_settling`` and hold every live DG within ``max_error`` of the
    reference over their steady-state tail.  An empty list means the run passes.
    """
    out = []
    if metrics.covariance_resets:
        out.append(f"{metrics.covariance_resets} observer covariance reset(s)")
    active = False
    for w in metrics.windows:
        active = active or w.label.startswith("activate-secondary")
        if not (active and w.available):
            continue
        where = f"window {w.t0:g}-{w.t1:g}s ({w.label})"
        if w.settling_time is None or w.settling_time > max_settling:
            out.append(f"{where}: not settled within {max_settling:g}s")
        worst = np.nanmax(w.ss_max_abs_error)
        if not worst < max_error:
            out.append(f"{where}: steady-state error {worst:.3f} V exceeds {max_error:g} V")
    return out
