"""RL lines and loads in the common rotating frame, plus bus-voltage resolution.

Two bus-voltage methods are available.  ``virtual`` is the classic
virtual-resistor node, ``v = r_virtual * (net injected current)``.  ``kcl``
(the default) picks bus voltages so that the net current injected at each bus
decays at rate ``kappa``; since it only needs the branch inductances it stays
well conditioned at the plant step size.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class Line:
    name: str
    from_bus: str
    to_bus: str
    R: float
    L: float


@dataclass(frozen=True)
class Load:
    name: str
    bus: str
    R: float
    L: float
    connected: bool = True


@dataclass(frozen=True)
class NetworkModel:
    buses: tuple
    lines: tuple
    loads: tuple
    dg_buses: tuple
    dg_closed: tuple
    dg_names: tuple = ()
    r_virtual: float = 1000.0
    method: str = "kcl"
    kappa: float = 1e3

    def __post_init__(self):
        buses = tuple(str(b) for b in self.buses)
        object.__setattr__(self, "buses", buses)
        if len(set(buses)) != len(buses):
            raise NetworkError("duplicate bus ids")
        names = tuple(self.dg_names) or tuple(f"DG{i + 1}" for i in range(len(self.dg_buses)))
        object.__setattr__(self, "dg_names", names)
        object.__setattr__(self, "dg_buses", tuple(str(b) for b in self.dg_buses))
        object.__setattr__(self, "dg_closed", tuple(bool(c) for c in self.dg_closed))
        if len(self.dg_closed) != len(self.dg_buses) or len(names) != len(self.dg_buses):
            raise NetworkError("dg_buses, dg_closed and dg_names must have equal length")
        known = set(buses)
        for ln in self.lines:
            for b in (ln.from_bus, ln.to_bus):
                if str(b) not in known:
                    raise NetworkError(f"line {ln.name} references unknown bus {b!r}")
            if ln.R < 0 or ln.L <= 0:
                raise NetworkError(f"line {ln.name} needs R >= 0 and L > 0")
        for ld in self.loads:
            if str(ld.bus) not in known:
                raise NetworkError(f"load {ld.name} references unknown bus {ld.bus!r}")
            if ld.R < 0 or ld.L <= 0:
                raise NetworkError(f"load {ld.name} needs R >= 0 and L > 0")
        for name, b in zip(names, self.dg_buses):
            if b not in known:
                raise NetworkError(f"{name} attached to unknown bus {b!r}")
        if not self.r_virtual > 0:
            raise NetworkError("r_virtual must be > 0")
        if self.method not in ("kcl", "virtual"):
            raise NetworkError(f"unknown bus-voltage method {self.method!r}")
        if not self.kappa > 0:
            raise NetworkError("kappa must be > 0")
        self._check_connected()

    def _check_connected(self):
        # every bus with a closed DG must share one line-connected component
        live = {b for b, c in zip(self.dg_buses, self.dg_closed) if c}
        if len(live) < 2:
            return
        adj = {b: set() for b in self.buses}
        for ln in self.lines:
            adj[str(ln.from_bus)].add(str(ln.to_bus))
            adj[str(ln.to_bus)].add(str(ln.from_bus))
        start = next(iter(live))
        seen, stack = {start}, [start]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if not live <= seen:
            raise NetworkError(f"buses {sorted(live - seen)} are not connected to bus {start}")

    def bus_index(self, bus) -> int:
        try:
            return self.buses.index(str(bus))
        except ValueError:
            raise NetworkError(f"unknown bus id {bus!r}") from None

    @property
    def n_states(self) -> int:
        return 2 * (len(self.lines) + len(self.loads))


@dataclass
class NetworkState:
    line_currents: np.ndarray
    load_currents: np.ndarray
    omega_com: float = 0.0

    @classmethod
    def zeros(cls, net: NetworkModel, omega_com=0.0):
        return cls(np.zeros((len(net.lines), 2)), np.zeros((len(net.loads), 2)), omega_com)


def _net_injection(net, netstate, dg_currents):
    res = np.zeros((len(net.buses), 2))
    dg_currents = np.asarray(dg_currents, dtype=float).reshape(-1, 2)
    for k, (bus, closed) in enumerate(zip(net.dg_buses, net.dg_closed)):
        if closed:
            res[net.bus_index(bus)] += dg_currents[k]
    for m, ln in enumerate(net.lines):
        res[net.bus_index(ln.from_bus)] -= netstate.line_currents[m]
        res[net.bus_index(ln.to_bus)] += netstate.line_currents[m]
    for m, ld in enumerate(net.loads):
        if ld.connected:
            res[net.bus_index(ld.bus)] -= netstate.load_currents[m]
    return res


def _has_branch(net):
    used = np.zeros(len(net.buses), dtype=bool)
    for bus, closed in zip(net.dg_buses, net.dg_closed):
        if closed:
            used[net.bus_index(bus)] = True
    for ln in net.lines:
        used[net.bus_index(ln.from_bus)] = used[net.bus_index(ln.to_bus)] = True
    for ld in net.loads:
        if ld.connected:
            used[net.bus_index(ld.bus)] = True
    return used


def bus_voltages(net: NetworkModel, netstate: NetworkState, dg_output_currents_common):
    """Virtual-resistor bus voltages, one DQ row per bus."""
    v = net.r_virtual * _net_injection(net, netstate, dg_output_currents_common)
    v[~_has_branch(net)] = 0.0
    return v


def kcl_matrix(net: NetworkModel, dg_L_c) -> np.ndarray:
    """Inductive nodal matrix used by the KCL projection.

    Buses with no live branch get a unit diagonal so the matrix stays
    invertible and their voltage resolves to zero.
    """
    nb = len(net.buses)
    m = np.zeros((nb, nb))
    for k, (bus, closed) in enumerate(zip(net.dg_buses, net.dg_closed)):
        if closed:
            a = net.bus_index(bus)
            m[a, a] += 1.0 / dg_L_c[k]
    for ln in net.lines:
        a, b = net.bus_index(ln.from_bus), net.bus_index(ln.to_bus)
        w = 1.0 / ln.L
        m[a, a] += w
        m[b, b] += w
        m[a, b] -= w
        m[b, a] -= w
    for ld in net.loads:
        if ld.connected:
            a = net.bus_index(ld.bus)
            m[a, a] += 1.0 / ld.L
    idle = ~_has_branch(net)
    m[idle, idle] = 1.0
    return m


def kcl_bus_voltages(net: NetworkModel, netstate: NetworkState, dg_currents_common,
                     dg_voltages_common, dg_R_c, dg_L_c):
    """Bus voltages making every bus's net injection decay at rate ``kappa``.

    Differentiating the net injection r gives ``dr/dt = f0 - M v``; choosing
    ``M v = f0 + kappa r`` yields ``dr/dt = -kappa r``.
    """
    w = netstate.omega_com
    nb = len(net.buses)
    f0 = np.zeros((nb, 2))
    i_dg = np.asarray(dg_currents_common, dtype=float).reshape(-1, 2)
    v_dg = np.asarray(dg_voltages_common, dtype=float).reshape(-1, 2)

    def drift(i, R, L):
        return np.array([-R * i[0] / L + w * i[1], -R * i[1] / L - w * i[0]])

    for k, (bus, closed) in enumerate(zip(net.dg_buses, net.dg_closed)):
        if closed:
            f0[net.bus_index(bus)] += drift(i_dg[k], dg_R_c[k], dg_L_c[k]) + v_dg[k] / dg_L_c[k]
    for m, ln in enumerate(net.lines):
        g = drift(netstate.line_currents[m], ln.R, ln.L)
        f0[net.bus_index(ln.from_bus)] -= g
        f0[net.bus_index(ln.to_bus)] += g
    for m, ld in enumerate(net.loads):
        if ld.connected:
            f0[net.bus_index(ld.bus)] -= drift(netstate.load_currents[m], ld.R, ld.L)
    res = _net_injection(net, netstate, i_dg)
    return np.linalg.solve(kcl_matrix(net, dg_L_c), f0 + net.kappa * res)


def network_derivative(net: NetworkModel, netstate: NetworkState, bus_v):
    """Derivatives of line and load currents, as ``(d_lines, d_loads)``."""
    w = netstate.omega_com
    bus_v = np.asarray(bus_v, dtype=float)
    d_lines = np.zeros((len(net.lines), 2))
    d_loads = np.zeros((len(net.loads), 2))

    def branch(i, R, L, dv):
        return np.array([(-R * i[0] + dv[0]) / L + w * i[1], (-R * i[1] + dv[1]) / L - w * i[0]])

    for m, ln in enumerate(net.lines):
        dv = bus_v[net.bus_index(ln.from_bus)] - bus_v[net.bus_index(ln.to_bus)]
        d_lines[m] = branch(netstate.line_currents[m], ln.R, ln.L, dv)
        if not np.all(np.isfinite(d_lines[m])):
            raise FloatingPointError(f"non-finite derivative in line {ln.name}")
    for m, ld in enumerate(net.loads):
        if ld.connected:
            d_loads[m] = branch(netstate.load_currents[m], ld.R, ld.L, bus_v[net.bus_index(ld.bus)])
            if not np.all(np.isfinite(d_loads[m])):
                raise FloatingPointError(f"non-finite derivative in load {ld.name}")
    return d_lines, d_loads


def set_breaker(net: NetworkModel, target: str, closed: bool) -> NetworkModel:
    """Open or close the breaker of a DG or load, returning a new model."""
    closed = bool(closed)
    if target in net.dg_names:
        k = net.dg_names.index(target)
        if net.dg_closed[k] == closed:
            return net
        flags = list(net.dg_closed)
        flags[k] = closed
        return replace(net, dg_closed=tuple(flags))
    for m, ld in enumerate(net.loads):
        if ld.name == target:
            if ld.connected == closed:
                return net
            loads = list(net.loads)
            loads[m] = replace(ld, connected=closed)
            return replace(net, loads=tuple(loads))
    raise NetworkError(f"unknown breaker target {target!r}")


def scale_load(net: NetworkModel, target: str, factor: float) -> NetworkModel:
    """Scale a load's admittance by ``factor`` (R and L divided by it)."""
    if not factor > 0:
        raise NetworkError("load scale factor must be > 0")
    for m, ld in enumerate(net.loads):
        if ld.name == target:
            loads = list(net.loads)
            loads[m] = replace(ld, R=ld.R / factor, L=ld.L / factor)
            return replace(net, loads=tuple(loads))
    raise NetworkError(f"unknown load {target!r}")


def pick_leader(connected, preferred=0) -> int:
    """Frequency-reference DG: ``preferred`` if connected, else the lowest connected index."""
    connected = np.asarray(connected, dtype=bool)
    if connected[preferred]:
        return int(preferred)
    live = np.flatnonzero(connected)
    if live.size == 0:
        raise NetworkError("no connected DG to act as frequency reference")
    log.info("frequency leader %d disconnected; falling back to DG index %d", preferred, live[0])
    return int(live[0])


def common_frequency(dg_frequencies, leader=0, connected=None) -> float:
    freqs = np.asarray(dg_frequencies, dtype=float)
    if connected is None:
        connected = np.ones(freqs.shape[0], dtype=bool)
    return float(freqs[pick_leader(connected, leader)])
