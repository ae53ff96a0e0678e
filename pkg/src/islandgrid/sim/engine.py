"""Fixed-step simulation of the full microgrid with its secondary layer.

The plant (all DGs plus network) advances with classical RK4 at
``dt_plant``.  Every ``control_period`` the engine samples the noisy
measurements, steps each DG's observer, evaluates the distributed law and
holds the resulting ``V_n`` over the next period.  Events land exactly on
their timestamps: a plant step straddling an event is split in two.
"""
from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass, field

import numpy as np

from .. import _kernels as K
from ..control import compensation, reaching, reaching_flow
from ..graph import TradeoffMode, build_laplacian, pinned_components, split_for_tradeoff
from ..network import kcl_matrix, pick_leader, scale_load, set_breaker
from ..plant import STATE_NAMES
from .metrics import Metrics, compute_metrics
from .scenario import Scenario
from .trace import Trace

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    """Numerical blowup; carries the partial trace up to the failure."""

    def __init__(self, msg, t, index, trace):
        super().__init__(msg)
        self.t = t
        self.index = index
        self.trace = trace


@dataclass
class SystemLayout:
    """Index map of the global state vector."""
    names: tuple

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name) -> int:
        return self.names.index(name)


@dataclass
class _NetArrays:
    par: np.ndarray
    dg_bus: np.ndarray
    dg_on: np.ndarray
    line_from: np.ndarray
    line_to: np.ndarray
    line_r: np.ndarray
    line_l: np.ndarray
    load_bus: np.ndarray
    load_r: np.ndarray
    load_l: np.ndarray
    load_on: np.ndarray
    minv: np.ndarray
    kappa: float
    method: int
    r_virtual: float

    def args(self, leader):
        return (self.par, self.dg_bus, self.dg_on, self.line_from, self.line_to, self.line_r,
                self.line_l, self.load_bus, self.load_r, self.load_l, self.load_on, self.minv,
                self.kappa, self.method, self.r_virtual, leader)


def _net_arrays(net, par):
    bi = net.bus_index
    return _NetArrays(
        par=par,
        dg_bus=np.array([bi(b) for b in net.dg_buses], dtype=np.int64),
        dg_on=np.array(net.dg_closed, dtype=np.bool_),
        line_from=np.array([bi(ln.from_bus) for ln in net.lines], dtype=np.int64),
        line_to=np.array([bi(ln.to_bus) for ln in net.lines], dtype=np.int64),
        line_r=np.array([ln.R for ln in net.lines], dtype=float),
        line_l=np.array([ln.L for ln in net.lines], dtype=float),
        load_bus=np.array([bi(ld.bus) for ld in net.loads], dtype=np.int64),
        load_r=np.array([ld.R for ld in net.loads], dtype=float),
        load_l=np.array([ld.L for ld in net.loads], dtype=float),
        load_on=np.array([ld.connected for ld in net.loads], dtype=np.bool_),
        minv=np.linalg.inv(kcl_matrix(net, par[:, K.L_C])),
        kappa=float(net.kappa),
        method=K.KCL_PROJECTION if net.method == "kcl" else K.VIRTUAL_RESISTOR,
        r_virtual=float(net.r_virtual),
    )


def assemble_system(scenario: Scenario):
    """State layout and a derivative function ``f(x, u, omega_n, leader)``."""
    names = [f"{dg}.{s}" for dg in scenario.dg_names for s in STATE_NAMES]
    for ln in scenario.network.lines:
        names += [f"{ln.name}.i_D", f"{ln.name}.i_Q"]
    for ld in scenario.network.loads:
        names += [f"{ld.name}.i_D", f"{ld.name}.i_Q"]
    par = np.array([p.as_array() for p in scenario.plant_params()])
    arrays = _net_arrays(scenario.network, par)

    def derivative(x, u, omega_n=None, leader=None):
        if omega_n is None:
            omega_n = np.array([p.omega_n for p in scenario.dg_params])
        lead = scenario.frequency_leader if leader is None else leader
        out = np.empty_like(x)
        K.system_rhs(np.asarray(x, dtype=float), np.asarray(u, dtype=float),
                     np.asarray(omega_n, dtype=float), *arrays.args(lead), out)
        return out

    return SystemLayout(tuple(names)), derivative


def integrate_step(state, derivative_fn, dt):
    """One classical RK4 step for a generic ``derivative_fn(x)``."""
    x = np.asarray(state, dtype=float)
    k1 = derivative_fn(x)
    k2 = derivative_fn(x + 0.5 * dt * k1)
    k3 = derivative_fn(x + 0.5 * dt * k2)
    k4 = derivative_fn(x + dt * k3)
    out = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise FloatingPointError(f"non-finite state at index {bad[0]}")
    return out


@dataclass
class RunResult:
    trace: Trace
    metrics: Metrics
    event_log: list = field(default_factory=list)
    covariance_resets: list = field(default_factory=list)
    spd_failures: int = 0
    wall_time: float = 0.0

    def __iter__(self):
        return iter((self.trace, self.metrics))


def _wrap(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


class _Engine:
    def __init__(self, sc: Scenario, observer_on=None, probe=None):
        self.sc = sc
        self.probe = probe
        n = sc.n_dg
        self.n = n
        self.observer_on = sc.observer.enabled if observer_on is None else observer_on
        self.par = np.array([p.as_array() for p in sc.plant_params()])
        self.par_nom = np.array([p.as_array() for p in sc.dg_params])
        self.g0 = np.array([p.g0 for p in sc.dg_params])
        self.n_q = self.par_nom[:, K.N_Q].copy()
        self.omega_nom = np.array([p.omega_n for p in sc.dg_params])
        self.omega_n = self.omega_nom.copy()
        self.net = sc.network
        self.arr = _net_arrays(self.net, self.par)
        self.connected = np.array(self.net.dg_closed, dtype=bool)
        self.leader = pick_leader(self.connected, sc.frequency_leader)
        self.x = np.zeros(K.N_DG_STATES * n + self.net.n_states)
        self.u = np.array([p.V_n for p in sc.dg_params], dtype=float)
        self.sigma2 = sc.sigma2
        self.rng = np.random.default_rng(sc.seed)

        self.graph = sc.graph
        self.adj = sc.graph.adjacency
        self.pin = sc.graph.pinning
        ctl = sc.controller
        self.ftsm = ctl.ftsm
        self.mode = TradeoffMode(ctl.tradeoff)
        split = split_for_tradeoff(sc.graph, self.mode, ctl.pinning_v)
        self.use_lv = bool(np.any(split.laplacian_v))
        self.use_lq = bool(np.any(split.laplacian_q))
        self.bv = np.diag(split.pinning_v).copy()
        self._lbar_cache = {}

        ocfg = sc.observer
        noise = ocfg.noise_config(sc.sigma2)
        self.obs_a = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
        self.obs_b = np.zeros((n, 3))
        self.obs_b[:, 1] = self.g0
        self.obs_c = np.array([1.0, 0.0, 0.0])
        self.obs_q = noise.Q
        self.obs_rinv = 1.0 / noise.R_x
        self.P0 = ocfg.P0_matrix
        self.xh = np.zeros((n, 3))
        self.P = np.array([self.P0.copy() for _ in range(n)])
        self.innov = np.zeros(n)
        self.y_obs = None
        self.obs_nsub = int(ocfg.substeps)
        self.spd = np.ones(n, dtype=np.bool_)

        self.secondary = False
        self.ramp_t0 = np.full(n, -np.inf)
        self.z_prev = np.zeros(n)
        self.y_prev = None
        self.unpinned_warned = set()
        self.event_log = []
        self.cov_resets = []
        self.spd_failures = 0
        self.tc = sc.control_period
        self.dt = sc.dt_plant

        # scratch buffers for the diagnostics kernel
        self.vdot = np.zeros(n)
        self.lf2h = np.zeros(n)
        self.xi = np.zeros(n)
        self.vbd = np.zeros(n)
        self.omega = np.zeros(n)
        self.bus_v = np.zeros((len(self.net.buses), 2))

    # --- events ---------------------------------------------------------------

    def _rebuild(self):
        self.arr = _net_arrays(self.net, self.par)

    def _io_slice(self, i):
        o = K.N_DG_STATES * i
        return slice(o + K.IO_D, o + K.IO_Q + 1)

    def _load_slice(self, m):
        o = K.N_DG_STATES * self.n + 2 * len(self.net.lines) + 2 * m
        return slice(o, o + 2)

    def apply_event(self, ev, t):
        kind = ev.kind
        detail = ""
        if kind == "activate-secondary":
            self.secondary = True
        elif kind == "deactivate-secondary":
            self.secondary = False
        elif kind in ("load-connect", "load-disconnect"):
            self.net = set_breaker(self.net, ev.target, kind == "load-connect")
            m = [ld.name for ld in self.net.loads].index(ev.target)
            self.x[self._load_slice(m)] = 0.0
            self._rebuild()
        elif kind == "load-scale":
            self.net = scale_load(self.net, ev.target, ev.value)
            self._rebuild()
        elif kind == "dg-disconnect":
            i = self.sc.dg_names.index(ev.target)
            self.net = set_breaker(self.net, ev.target, False)
            self.connected[i] = False
            self.x[self._io_slice(i)] = 0.0
            self._rebuild()
        elif kind == "dg-reconnect":
            i = self.sc.dg_names.index(ev.target)
            if not self.connected[i]:
                self.net = set_breaker(self.net, ev.target, True)
                self.connected[i] = True
                self.x[self._io_slice(i)] = 0.0
                self.omega_n[i] = self.omega_nom[i]
                self.ramp_t0[i] = t
                self.u[i] = self.sc.plug.ramp_start * self.sc.v_ref
                v_meas = self.x[K.N_DG_STATES * i + K.VO_D]
                self.xh[i] = (v_meas, 0.0, 0.0)
                self.P[i] = self.P0
                if self.y_obs is not None:
                    self.y_obs[i] = v_meas
                self._rebuild()
        elif kind == "set-noise-variance":
            self.sigma2 = float(ev.value)
        lead = pick_leader(self.connected, self.sc.frequency_leader)
        if lead != self.leader:
            detail = f"frequency leader {self.sc.dg_names[self.leader]} -> {self.sc.dg_names[lead]}"
            self.leader = lead
        self.event_log.append((t, kind, ev.target, detail))

    # --- control --------------------------------------------------------------

    def _live(self, t):
        """DGs whose secondary law is engaged this period."""
        ramping = t < self.ramp_t0 + self.sc.plug.ramp_time
        live = self.connected & ~ramping
        if not self.secondary:
            return np.zeros(self.n, dtype=bool)
        ok = pinned_components(self.graph, live)
        for i in np.flatnonzero(live & ~ok):
            if i not in self.unpinned_warned:
                log.warning("%s has no path to a pinned DG; secondary control suspended",
                            self.sc.dg_names[i])
                self.unpinned_warned.add(i)
        self.unpinned_warned &= set(np.flatnonzero(live & ~ok))
        return ok

    def _lbar(self, live):
        """Masked coupling matrix of the law plus the voltage and sharing Laplacians."""
        key = live.tobytes()
        hit = self._lbar_cache.get(key)
        if hit is not None:
            return hit
        a = self.adj * np.outer(live, live)
        lap = np.diag(a.sum(axis=1)) - a
        bv = self.bv * live
        if self.use_lv:
            lbar = lap + np.diag(bv)
        elif bv.any():
            # L_V = 0: pinned DGs decouple into b_i z_i = w_i, the rest keep
            # the communication-graph row
            lbar = lap + np.diag(self.pin * live)
            pinned = bv > 0
            lbar[pinned, :] = 0.0
            lbar[pinned, pinned] = bv[pinned]
        else:
            # sharing only; voltage terms vanish and the graph degrees are used
            lbar = lap + np.diag(self.pin * live)
        idle = ~live
        lbar[idle, :] = 0.0
        lbar[:, idle] = 0.0
        lbar[idle, idle] = 1.0
        hit = (lbar, lap if self.use_lv else np.zeros_like(lap), lap)
        self._lbar_cache[key] = hit
        return hit

    def control(self, t, y1, y2, xi_hat, nqq):
        n = self.n
        live = self._live(t)
        s = np.zeros(n)
        e1 = np.zeros(n)
        e2 = np.zeros(n)
        sat = np.zeros(n)
        if not live.any():
            return s, e1, e2, sat, live
        lbar, lap_v, lap_q = self._lbar(live)
        ref = self.sc.v_ref
        bv = self.bv * live
        e1 = lap_v @ y1 + bv * (y1 - ref)
        e2 = lap_v @ y2 + bv * y2
        p = self.ftsm
        s = e2 + p.c * np.sign(e1) * np.abs(e1) ** (p.m / p.n) \
            + p.d * np.sign(e1) * np.abs(e1) ** (p.p / p.q)
        if self.use_lq:
            eq = lap_q @ nqq
            s = s + p.c_q * np.sign(eq) * np.abs(eq) ** (p.m1 / p.n1) \
                + p.d_q * np.sign(eq) * np.abs(eq) ** (p.p1 / p.q1)
        ctl = self.sc.controller
        if ctl.kind == "baseline":
            k1, k2 = ctl.baseline_gains
            w = -k1 * e1 - k2 * e2
        else:
            r = reaching_flow(p, s, self.tc) if ctl.reaching == "flow" else reaching(p, s)
            w = r - compensation(p, e1, e2)
        w = np.where(live, w, 0.0)
        if ctl.coupling == "solve":
            z = np.linalg.solve(lbar, w)
        else:
            off = np.diag(np.diag(lbar)) - lbar
            z = np.where(live, (off @ self.z_prev + w) / np.diag(lbar), 0.0)
        self.z_prev = z
        u_raw = (z - xi_hat) / self.g0
        u_new = np.clip(u_raw, 0.0, ctl.v_max)
        sat = (u_new != u_raw) & live
        self.u = np.where(live, u_new, self.u)
        s = np.where(live, s, 0.0)
        return s, e1, e2, sat.astype(float), live

    def _ramp_inputs(self, t):
        pl = self.sc.plug
        for i in np.flatnonzero(self.connected & (t < self.ramp_t0 + pl.ramp_time)):
            frac = (t - self.ramp_t0[i]) / pl.ramp_time
            self.u[i] = self.sc.v_ref * (pl.ramp_start + (1.0 - pl.ramp_start) * frac)

    def _synchronize(self, wcom):
        """Phase-lock open-breaker DGs to their bus so reclosing is bumpless."""
        k = self.sc.plug.sync_gain
        for i in np.flatnonzero(~self.connected):
            if k <= 0:
                continue
            b = self.arr.dg_bus[i]
            vb = self.bus_v[b]
            if math.hypot(vb[0], vb[1]) < 1.0:
                self.omega_n[i] = self.omega_nom[i]
                continue
            o = K.N_DG_STATES * i
            theta = self.x[o + K.DELTA] + math.atan2(self.x[o + K.VO_Q], self.x[o + K.VO_D])
            err = _wrap(theta - math.atan2(vb[1], vb[0]))
            self.omega_n[i] = wcom + self.par[i, K.M_P] * self.x[o + K.PP] - k * err

    # --- main loop ------------------------------------------------------------

    def _advance(self, t0, t1, events, ev_idx):
        """Integrate from t0 to t1, applying events that fall strictly inside."""
        t = t0
        while ev_idx < len(events) and events[ev_idx].time < t1 - 1e-12:
            te = events[ev_idx].time
            self._integrate(te - t)
            t = te
            while ev_idx < len(events) and events[ev_idx].time <= te + 1e-12:
                self.apply_event(events[ev_idx], te)
                ev_idx += 1
        self._integrate(t1 - t)
        return ev_idx

    def _integrate(self, span):
        if span <= 1e-15:
            return
        nfull = int(math.floor(span / self.dt + 1e-9))
        rest = span - nfull * self.dt
        args = self.arr.args(self.leader)
        if nfull:
            bad = K.rk4_advance(self.x, nfull, self.dt, self.u, self.omega_n, *args)
            if bad >= 0:
                raise _Blowup(bad)
        if rest > 1e-12:
            bad = K.rk4_advance(self.x, 1, rest, self.u, self.omega_n, *args)
            if bad >= 0:
                raise _Blowup(bad)

    def state_name(self, idx):
        nd = K.N_DG_STATES * self.n
        if idx < nd:
            return f"{self.sc.dg_names[idx // K.N_DG_STATES]}.{STATE_NAMES[idx % K.N_DG_STATES]}"
        j = (idx - nd) // 2
        if j < len(self.net.lines):
            return f"{self.net.lines[j].name}.i_{'DQ'[(idx - nd) % 2]}"
        j -= len(self.net.lines)
        return f"{self.net.loads[j].name}.i_{'DQ'[(idx - nd) % 2]}"

    def run(self):
        sc = self.sc
        n = self.n
        tc = self.tc
        n_per = int(round(sc.duration / tc))
        trace = Trace(sc.dg_names, n_per)
        events = list(sc.events)
        ev_idx = 0
        sq = math.sqrt
        vo = np.arange(n) * K.N_DG_STATES + K.VO_D
        qq = np.arange(n) * K.N_DG_STATES + K.QQ
        all_on = np.ones(n, dtype=np.bool_)
        for k in range(n_per):
            t = k * tc
            while ev_idx < len(events) and events[ev_idx].time <= t + 1e-12:
                self.apply_event(events[ev_idx], t)
                ev_idx += 1
            noise = self.rng.standard_normal(n) * sq(self.sigma2)
            wcom = K.diagnostics(self.x, self.u, self.omega_n, self.g0,
                                 *self.arr.args(self.leader), self.vdot, self.lf2h, self.xi,
                                 self.vbd, self.omega, self.bus_v)
            v_od = self.x[vo]
            y = v_od + noise
            u_prev = self.u.copy()
            xi_true = self.xi.copy()
            self._ramp_inputs(t)
            if self.observer_on:
                y0 = y if self.y_obs is None else self.y_obs
                self.y_obs = y.copy()
                K.kb_batch(self.xh, self.P, y0, y, u_prev, tc, self.obs_a, self.obs_b, self.obs_c,
                           self.obs_q, self.obs_rinv, all_on, self.innov, self.spd,
                           self.obs_nsub)
                if not self.spd.all():
                    for i in np.flatnonzero(~self.spd):
                        log.warning("%s observer covariance lost positive definiteness at "
                                    "t=%.4f; resetting", sc.dg_names[i], t)
                        self.P[i] = self.P0
                        self.cov_resets.append((t, sc.dg_names[i]))
                    self.spd_failures += int((~self.spd).sum())
                y1 = self.xh[:, 0].copy()
                y2 = self.xh[:, 1].copy()
                xi_hat = self.xh[:, 2].copy()
            else:
                y1 = y
                y2 = np.zeros(n) if self.y_prev is None else (y - self.y_prev) / tc
                self.y_prev = y
                xi_hat = self._measured_lie(y)
            nqq = self.n_q * self.x[qq]
            s, e1, e2, sat, live = self.control(t, y1, y2, xi_hat, nqq)
            if not self.connected.all():
                self._synchronize(wcom)
            if self.probe is not None:
                self.probe(t, self.x.copy(), self.u.copy(), self.omega_n.copy(),
                           self.arr.args(self.leader))
            trace.append(t, {
                "v_od": v_od, "v_oq": self.x[vo + 1], "P": self.x[qq - 1], "Q": self.x[qq],
                "V_n": self.u, "s": s, "e1": e1, "e2": e2,
                "xhat1": y1, "xhat2": y2, "xhat3": xi_hat,
                "vdot_true": self.vdot, "xi_true": xi_true, "saturated": sat,
                "y_meas": y, "innovation": self.innov, "P11": self.P[:, 0, 0],
                "P22": self.P[:, 1, 1], "P33": self.P[:, 2, 2],
                "connected": self.connected, "secondary": live,
            }, 0.5 * float(np.dot(s, s)), wcom)
            try:
                ev_idx = self._advance(t, t + tc, events, ev_idx)
            except _Blowup as exc:
                name = self.state_name(exc.index)
                raise SimulationError(
                    f"numerical blowup at t={t:.6f}s in state {name} (index {exc.index})",
                    t, exc.index, trace) from None
        return trace

    def _measured_lie(self, y):
        """L_F²h evaluated on measured states with nominal parameters."""
        n = self.n
        xs = self.x[:K.N_DG_STATES * n].reshape(n, K.N_DG_STATES).copy()
        xs[:, K.VO_D] = y
        vbd = self.vbd.copy()
        if self.sc.noise_all_measurements and self.sigma2 > 0:
            sd = math.sqrt(self.sigma2)
            extra = self.rng.standard_normal((n, K.N_DG_STATES + 1)) * sd
            extra[:, K.VO_D] = 0.0
            extra[:, K.DELTA] = 0.0
            xs += extra[:, :K.N_DG_STATES]
            vbd += extra[:, K.N_DG_STATES]
        omega = self.omega_n - self.par_nom[:, K.M_P] * xs[:, K.PP]
        out = np.empty(n)
        K.lie_batch(xs, self.par_nom, vbd, omega, out)
        return out


class _Blowup(Exception):
    def __init__(self, index):
        self.index = index


def run(scenario: Scenario, observer=None, probe=None) -> RunResult:
    """Simulate ``scenario``.

    ``observer`` overrides the config: ``False`` feeds the controller raw
    measurements, first-differenced rates and the drift term evaluated on
    measured states.  ``probe(t, x, u, omega_n, args)`` is called once per
    control period with copies of the plant state and held inputs, plus the
    network arguments of the kernel functions.  Those arguments are live and
    change at events; copy them to keep them.
    """
    t0 = _time.perf_counter()
    eng = _Engine(scenario, observer, probe)
    trace = eng.run()
    metrics = compute_metrics(trace, scenario)
    metrics.covariance_resets = len(eng.cov_resets)
    return RunResult(trace, metrics, eng.event_log, eng.cov_resets, eng.spd_failures,
                     _time.perf_counter() - t0)


def run_noise_sweep(scenario: Scenario, variances=(0.01, 0.1, 1.0), observer_paths=(True, False)):
    """Metrics per noise variance, with and without the observer.

    Returns ``{(variance, observer_on): RunResult}``; a run that blows up is
    stored as its :class:`SimulationError`.
    """
    out = {}
    for var in variances:
        sc = scenario.with_(sigma2=float(var))
        for obs in observer_paths:
            try:
                out[(float(var), bool(obs))] = run(sc, observer=obs)
            except SimulationError as exc:
                out[(float(var), bool(obs))] = exc
    return out
