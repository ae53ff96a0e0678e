"""Scenario definition and YAML config loading.

Config files have the sections ``run``, ``dgs``, ``network``, ``graph``,
``controller``, ``observer``, ``noise``, ``plug_and_play`` and ``events``.
Every validation error names the file, line, section and key.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from ..control import ControlError, FtsmParams
from ..graph import CommGraph, GraphError, TradeoffMode
from ..network import Line, Load, NetworkError, NetworkModel
from ..observer import DEFAULT_P0, NoiseConfig, ObserverError
from ..plant import TABLE_I, DGParams, Perturbation, PlantError

EVENT_KINDS = (
    "activate-secondary", "deactivate-secondary", "load-connect", "load-disconnect",
    "load-scale", "dg-disconnect", "dg-reconnect", "set-noise-variance",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    target: str | None = None
    value: float | None = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ConfigError(f"unknown event kind {self.kind!r}; expected one of {EVENT_KINDS}")


@dataclass(frozen=True)
class ControllerConfig:
    kind: str = "ftsm"
    ftsm: FtsmParams = field(default_factory=FtsmParams)
    baseline_gains: tuple = (6.4e5, 1600.0)
    tradeoff: TradeoffMode = TradeoffMode.VOLTAGE_ONLY
    pinning_v: tuple | None = None
    reaching: str = "flow"
    coupling: str = "solve"
    v_max: float = 622.0

    def __post_init__(self):
        if self.kind not in ("ftsm", "baseline"):
            raise ConfigError(f"controller kind must be 'ftsm' or 'baseline', got {self.kind!r}")
        if self.reaching not in ("flow", "pointwise"):
            raise ConfigError(f"reaching must be 'flow' or 'pointwise', got {self.reaching!r}")
        if self.coupling not in ("solve", "delayed"):
            raise ConfigError(f"coupling must be 'solve' or 'delayed', got {self.coupling!r}")
        if not (self.baseline_gains[0] > 0 and self.baseline_gains[1] > 0):
            raise ConfigError("baseline gains must be > 0")
        if not self.v_max > 0:
            raise ConfigError("v_max must be > 0")


@dataclass(frozen=True)
class ObserverConfig:
    enabled: bool = True
    Q_x: tuple = (1e-2, 1e2)
    Q_xi: float = 1e18
    R: float | None = None
    P0: tuple = tuple(np.diag(DEFAULT_P0))
    substeps: int = 1

    def __post_init__(self):
        if int(self.substeps) < 1:
            raise ConfigError("observer substeps must be >= 1")

    def noise_config(self, sigma2) -> NoiseConfig:
        r = self.R if self.R is not None else (sigma2 if sigma2 > 0 else 0.01)
        return NoiseConfig(Q_x=self.Q_x, Q_xi=self.Q_xi, R_x=r, sigma2_meas=sigma2)

    @property
    def P0_matrix(self) -> np.ndarray:
        return np.diag(np.asarray(self.P0, dtype=float))


@dataclass(frozen=True)
class PlugConfig:
    ramp_start: float = 0.9
    ramp_time: float = 0.05
    sync_gain: float = 20.0


@dataclass(frozen=True)
class Scenario:
    dg_names: tuple
    dg_params: tuple
    perturbations: tuple
    network: NetworkModel
    graph: CommGraph
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    observer: ObserverConfig = field(default_factory=ObserverConfig)
    sigma2: float = 0.01
    noise_all_measurements: bool = False
    plug: PlugConfig = field(default_factory=PlugConfig)
    events: tuple = ()
    duration: float = 4.0
    dt_plant: float = 2e-5
    control_period: float = 1e-4
    seed: int = 0
    v_ref: float = 311.0
    frequency_leader: int = 0

    def __post_init__(self):
        n = len(self.dg_names)
        if len(self.dg_params) != n or len(self.perturbations) != n:
            raise ConfigError("dg_names, dg_params and perturbations must have equal length")
        if self.graph.n != n:
            raise ConfigError(f"graph has {self.graph.n} nodes but the scenario has {n} DGs")
        if len(self.network.dg_buses) != n:
            raise ConfigError(
                f"network attaches {len(self.network.dg_buses)} DGs but the scenario has {n}"
            )
        if not (self.dt_plant > 0 and self.control_period > 0 and self.duration > 0):
            raise ConfigError("duration, dt_plant and control_period must be > 0")
        if self.dt_plant > self.control_period:
            raise ConfigError("dt_plant must not exceed control_period")
        ratio = self.control_period / self.dt_plant
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ConfigError(
                f"control_period {self.control_period} is not an integer multiple of dt_plant {self.dt_plant}"
            )
        if self.sigma2 < 0:
            raise ConfigError("noise variance must be >= 0")
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise ConfigError("events must be sorted by time")
        for e in self.events:
            if not 0.0 <= e.time <= self.duration:
                raise ConfigError(f"event {e.kind} at t={e.time} lies outside [0, {self.duration}]")
            if e.kind.startswith("dg-") and e.target not in self.dg_names:
                raise ConfigError(f"event {e.kind} targets unknown DG {e.target!r}")
            if e.kind.startswith("load-") and e.target not in [ld.name for ld in self.network.loads]:
                raise ConfigError(f"event {e.kind} targets unknown load {e.target!r}")
            if e.kind in ("load-scale", "set-noise-variance") and e.value is None:
                raise ConfigError(f"event {e.kind} at t={e.time} needs a value")
        if not 0 <= self.frequency_leader < n:
            raise ConfigError("frequency_leader out of range")

    @property
    def n_dg(self) -> int:
        return len(self.dg_names)

    @property
    def substeps(self) -> int:
        return int(round(self.control_period / self.dt_plant))

    def plant_params(self):
        return tuple(p.perturbed(pt) for p, pt in zip(self.dg_params, self.perturbations))

    def with_(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def with_controller(self, **changes) -> "Scenario":
        return self.with_(controller=dataclasses.replace(self.controller, **changes))

    def with_observer(self, **changes) -> "Scenario":
        return self.with_(observer=dataclasses.replace(self.observer, **changes))

    def truncated(self, duration) -> "Scenario":
        """Same scenario cut at ``duration``; later events are dropped."""
        return self.with_(duration=float(duration),
                          events=tuple(e for e in self.events if e.time <= duration))

    def without_events(self, *kinds) -> "Scenario":
        return self.with_(events=tuple(e for e in self.events if e.kind not in kinds))


# --- YAML loading -------------------------------------------------------------


class _Doc:
    """Parsed YAML plus a map from key path to source line."""

    def __init__(self, text, source):
        self.source = source
        self.lines = {}
        try:
            node = yaml.compose(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"{source}:{mark.line + 1}" if mark else source
            raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
        self.data = self._build(node, ()) if node is not None else {}

    def _build(self, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            out = {}
            for k, v in node.value:
                key = str(k.value)
                if key in out:
                    raise ConfigError(f"{self.source}:{k.start_mark.line + 1}: duplicate key {key!r}")
                out[key] = self._build(v, path + (key,))
            return out
        if isinstance(node, yaml.SequenceNode):
            return [self._build(v, path + (i,)) for i, v in enumerate(node.value)]
        return yaml.safe_load(yaml.serialize(node))

    def where(self, path):
        path = tuple(path)
        while path and path not in self.lines:
            path = path[:-1]
        return f"{self.source}:{self.lines.get(path, 1)}"

    def fail(self, path, msg):
        label = ".".join(str(p) for p in path) or "<root>"
        raise ConfigError(f"{self.where(path)}: {label}: {msg}")


class _Section:
    """Typed accessors over one mapping, reporting errors with locations."""

    def __init__(self, doc, path, data, allowed):
        self.doc, self.path, self.data = doc, tuple(path), data
        if data is None:
            self.data = {}
        elif not isinstance(data, dict):
            doc.fail(self.path, "expected a mapping")
        unknown = set(self.data) - set(allowed)
        if unknown:
            key = sorted(unknown)[0]
            doc.fail(self.path + (key,), f"unknown key (allowed: {', '.join(sorted(allowed))})")

    def has(self, key):
        return key in self.data

    def num(self, key, default=None, positive=False, nonneg=False):
        if key not in self.data:
            if default is None:
                self.doc.fail(self.path + (key,), "required key missing")
            return default
        v = self.data[key]
        try:
            if isinstance(v, bool):
                raise TypeError
            v = float(v)
        except (TypeError, ValueError):
            self.doc.fail(self.path + (key,), f"expected a number, got {v!r}")
        if not math.isfinite(v):
            self.doc.fail(self.path + (key,), "must be finite")
        if positive and not v > 0:
            self.doc.fail(self.path + (key,), f"must be > 0, got {v}")
        if nonneg and v < 0:
            self.doc.fail(self.path + (key,), f"must be >= 0, got {v}")
        return v

    def int_(self, key, default=None):
        v = self.num(key, default)
        if v != int(v):
            self.doc.fail(self.path + (key,), f"expected an integer, got {v}")
        return int(v)

    def str_(self, key, default=None, choices=None):
        if key not in self.data:
            if default is None:
                self.doc.fail(self.path + (key,), "required key missing")
            return default
        v = self.data[key]
        if not isinstance(v, (str, int)) or isinstance(v, bool):
            self.doc.fail(self.path + (key,), f"expected a string, got {v!r}")
        v = str(v)
        if choices and v not in choices:
            self.doc.fail(self.path + (key,), f"must be one of {list(choices)}, got {v!r}")
        return v

    def bool_(self, key, default):
        v = self.data.get(key, default)
        if not isinstance(v, bool):
            self.doc.fail(self.path + (key,), f"expected true/false, got {v!r}")
        return v

    def list_(self, key, required=True):
        if key not in self.data:
            if required:
                self.doc.fail(self.path + (key,), "required key missing")
            return []
        v = self.data[key]
        if not isinstance(v, list):
            self.doc.fail(self.path + (key,), "expected a list")
        return v

    def numlist(self, key, length, default):
        if key not in self.data:
            return default
        v = self.data[key]
        if not isinstance(v, list) or len(v) != length:
            self.doc.fail(self.path + (key,), f"expected a list of {length} numbers")
        try:
            return tuple(float(x) for x in v)
        except (TypeError, ValueError):
            self.doc.fail(self.path + (key,), "expected numbers")


_DG_KEYS = ("m_P", "n_Q", "K_Pv", "K_Iv", "K_Pc", "K_Ic", "R_f", "L_f", "C_f", "R_c", "L_c",
            "omega_c", "omega_b", "omega_n", "V_n")
_FTSM_INT = ("m", "n", "p", "q", "m1", "n1", "p1", "q1")
_FTSM_FLOAT = ("c", "d", "alpha", "beta", "boundary_layer", "c_q", "d_q", "eps")


def _guard(doc, path, fn):
    try:
        return fn()
    except (PlantError, NetworkError, GraphError, ControlError, ObserverError, ConfigError) as exc:
        doc.fail(path, str(exc))


def _load_dgs(doc, raw):
    if not isinstance(raw, list) or not raw:
        doc.fail(("dgs",), "expected a non-empty list of DG blocks")
    names, params, perts, buses = [], [], [], []
    for k, block in enumerate(raw):
        path = ("dgs", k)
        sec = _Section(doc, path, block, ("name", "preset", "bus", "params", "perturbation"))
        name = sec.str_("name")
        if name in names:
            doc.fail(path + ("name",), f"duplicate DG name {name!r}")
        base = {}
        if sec.has("preset"):
            preset = sec.str_("preset", choices=tuple(TABLE_I))
            base = dataclasses.asdict(TABLE_I[preset])
        psec = _Section(doc, path + ("params",), block.get("params"), _DG_KEYS)
        for key in _DG_KEYS:
            if psec.has(key):
                base[key] = psec.num(key)
        for key in ("m_P", "n_Q", "K_Pv", "K_Iv", "K_Pc", "K_Ic"):
            if key not in base:
                doc.fail(path + ("params", key), "required DG parameter missing (no preset given)")
        params.append(_guard(doc, path + ("params",), lambda: DGParams(**base)))
        xsec = _Section(doc, path + ("perturbation",), block.get("perturbation"),
                        ("R_f", "L_f", "C_f", "R_c", "L_c"))
        factors = {key: xsec.num(key) for key in xsec.data}
        perts.append(_guard(doc, path + ("perturbation",), lambda: Perturbation(factors)))
        names.append(name)
        buses.append(sec.str_("bus"))
    return tuple(names), tuple(params), tuple(perts), tuple(buses)


def _load_network(doc, raw, dg_names, dg_buses):
    sec = _Section(doc, ("network",), raw, ("buses", "lines", "loads", "method", "r_virtual", "kappa"))
    buses = [str(b) for b in sec.list_("buses")]
    lines, loads = [], []
    for k, item in enumerate(sec.list_("lines", required=False)):
        s = _Section(doc, ("network", "lines", k), item, ("name", "from", "to", "R", "L"))
        lines.append(Line(s.str_("name", f"Line{k + 1}"), s.str_("from"), s.str_("to"),
                          s.num("R", nonneg=True), s.num("L", positive=True)))
    for k, item in enumerate(sec.list_("loads", required=False)):
        s = _Section(doc, ("network", "loads", k), item, ("name", "bus", "R", "L", "connected"))
        loads.append(Load(s.str_("name", f"Load{k + 1}"), s.str_("bus"), s.num("R", nonneg=True),
                          s.num("L", positive=True), s.bool_("connected", True)))
    return _guard(doc, ("network",), lambda: NetworkModel(
        tuple(buses), tuple(lines), tuple(loads), dg_buses, (True,) * len(dg_buses), dg_names,
        r_virtual=sec.num("r_virtual", 1000.0, positive=True),
        method=sec.str_("method", "kcl", choices=("kcl", "virtual")),
        kappa=sec.num("kappa", 1e3, positive=True)))


def _node(doc, path, name, dg_names):
    if str(name) not in dg_names:
        doc.fail(path, f"unknown DG {name!r}")
    return dg_names.index(str(name))


def _load_graph(doc, raw, dg_names):
    sec = _Section(doc, ("graph",), raw, ("edges", "pinned", "undirected"))
    n = len(dg_names)
    edges = []
    for k, e in enumerate(sec.list_("edges", required=False)):
        path = ("graph", "edges", k)
        if not isinstance(e, list) or len(e) not in (2, 3):
            doc.fail(path, "edge must be [from, to] or [from, to, weight]")
        i, j = _node(doc, path, e[0], dg_names), _node(doc, path, e[1], dg_names)
        edges.append((i, j, float(e[2])) if len(e) == 3 else (i, j))
    pinned_raw = sec.data.get("pinned")
    if isinstance(pinned_raw, list):
        pinned = {_node(doc, ("graph", "pinned"), p, dg_names): 1.0 for p in pinned_raw}
    elif isinstance(pinned_raw, dict):
        psec = _Section(doc, ("graph", "pinned"), pinned_raw, dg_names)
        pinned = {dg_names.index(k): psec.num(k, nonneg=True) for k in pinned_raw}
    else:
        doc.fail(("graph", "pinned"), "required: list of DG names or mapping name -> gain")
    undirected = sec.bool_("undirected", True)
    return _guard(doc, ("graph",), lambda: CommGraph.from_edges(n, edges, pinned, undirected))


def _load_controller(doc, raw, dg_names):
    allowed = ("kind", "baseline_gains", "tradeoff", "pinning_v", "reaching", "coupling",
               "v_max") + _FTSM_INT + _FTSM_FLOAT
    sec = _Section(doc, ("controller",), raw, allowed)
    kw = {}
    for key in _FTSM_INT:
        if sec.has(key):
            kw[key] = sec.int_(key)
            if kw[key] <= 0 or kw[key] % 2 == 0:
                doc.fail(("controller", key), f"must be a positive odd integer, got {kw[key]}")
    for key in _FTSM_FLOAT:
        if sec.has(key):
            kw[key] = sec.num(key)
    ftsm = _guard(doc, ("controller",), lambda: FtsmParams(**kw))
    pinning_v = None
    if sec.has("pinning_v"):
        psec = _Section(doc, ("controller", "pinning_v"), sec.data["pinning_v"], dg_names)
        pv = np.zeros(len(dg_names))
        for k in psec.data:
            pv[dg_names.index(k)] = psec.num(k, nonneg=True)
        pinning_v = tuple(pv)
    mode = sec.str_("tradeoff", "voltage-only", choices=tuple(m.value for m in TradeoffMode))
    return _guard(doc, ("controller",), lambda: ControllerConfig(
        kind=sec.str_("kind", "ftsm", choices=("ftsm", "baseline")),
        ftsm=ftsm,
        baseline_gains=sec.numlist("baseline_gains", 2, (6.4e5, 1600.0)),
        tradeoff=TradeoffMode(mode),
        pinning_v=pinning_v,
        reaching=sec.str_("reaching", "flow", choices=("flow", "pointwise")),
        coupling=sec.str_("coupling", "solve", choices=("solve", "delayed")),
        v_max=sec.num("v_max", 622.0, positive=True)))


def _load_observer(doc, raw):
    sec = _Section(doc, ("observer",), raw, ("enabled", "Q_x", "Q_xi", "R", "P0",
                                                     "substeps"))
    r = sec.num("R", positive=True) if sec.has("R") and sec.data["R"] is not None else None
    p0 = sec.numlist("P0", 3, tuple(np.diag(DEFAULT_P0)))
    if min(p0) <= 0:
        doc.fail(("observer", "P0"), "P0 diagonal must be > 0")
    cfg = ObserverConfig(enabled=sec.bool_("enabled", True),
                         Q_x=sec.numlist("Q_x", 2, (1e-2, 1e2)),
                         Q_xi=sec.num("Q_xi", 1e18, positive=True), R=r, P0=p0,
                         substeps=sec.int_("substeps", 1))
    _guard(doc, ("observer",), lambda: cfg.noise_config(0.01))
    return cfg


def _load_events(doc, raw, dg_names, load_names):
    events = []
    for k, item in enumerate(raw or []):
        path = ("events", k)
        s = _Section(doc, path, item, ("t", "kind", "target", "value"))
        kind = s.str_("kind", choices=EVENT_KINDS)
        target = s.str_("target") if s.has("target") else None
        value = s.num("value") if s.has("value") else None
        if kind in ("load-scale", "set-noise-variance") and value is None:
            doc.fail(path + ("value",), f"{kind} needs a value")
        if (kind.startswith("load-") or kind.startswith("dg-")) and target is None:
            doc.fail(path + ("target",), f"{kind} needs a target")
        known = dg_names if kind.startswith("dg-") else load_names if kind.startswith("load-") else None
        if known is not None and target not in known:
            doc.fail(path + ("target",), f"unknown target {target!r} for {kind}")
        events.append(Event(s.num("t", nonneg=True), kind, target, value))
    times = [e.time for e in events]
    for k in range(1, len(times)):
        if times[k] < times[k - 1]:
            doc.fail(("events", k, "t"), "events must be sorted by time")
    return tuple(events)


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    doc = _Doc(text, source)
    top = _Section(doc, (), doc.data, ("run", "dgs", "network", "graph", "controller", "observer",
                                       "noise", "plug_and_play", "events"))
    for key in ("dgs", "network", "graph"):
        if not top.has(key):
            doc.fail((key,), "required section missing")
    run = _Section(doc, ("run",), top.data.get("run"),
                   ("duration", "dt_plant", "control_period", "seed", "v_ref", "frequency_leader"))
    names, params, perts, buses = _load_dgs(doc, top.data["dgs"])
    network = _load_network(doc, top.data["network"], names, buses)
    graph = _load_graph(doc, top.data["graph"], names)
    controller = _load_controller(doc, top.data.get("controller"), names)
    observer = _load_observer(doc, top.data.get("observer"))
    noise = _Section(doc, ("noise",), top.data.get("noise"), ("sigma2", "all_measurements"))
    plug = _Section(doc, ("plug_and_play",), top.data.get("plug_and_play"),
                    ("ramp_start", "ramp_time", "sync_gain"))
    leader = run.str_("frequency_leader", names[0])
    if leader not in names:
        doc.fail(("run", "frequency_leader"), f"unknown DG {leader!r}")
    events = _load_events(doc, top.data.get("events"), names,
                          [ld.name for ld in network.loads])
    return _guard(doc, (), lambda: Scenario(
        dg_names=names, dg_params=params, perturbations=perts, network=network, graph=graph,
        controller=controller, observer=observer,
        sigma2=noise.num("sigma2", 0.01, nonneg=True) if noise.has("sigma2") else 0.01,
        noise_all_measurements=noise.bool_("all_measurements", False),
        plug=PlugConfig(plug.num("ramp_start", 0.9, positive=True),
                        plug.num("ramp_time", 0.05, positive=True),
                        plug.num("sync_gain", 20.0, nonneg=True) if plug.has("sync_gain") else 20.0),
        events=events,
        duration=run.num("duration", 4.0, positive=True),
        dt_plant=run.num("dt_plant", 2e-5, positive=True),
        control_period=run.num("control_period", 1e-4, positive=True),
        seed=run.int_("seed", 0) if run.has("seed") else 0,
        v_ref=run.num("v_ref", 311.0, positive=True),
        frequency_leader=names.index(leader)))


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_scenario(text, str(path))


def shipped_config(name: str) -> str:
    """Text of a config bundled with the package (``table1``, ``tradeoff``, ``chain8``)."""
    return resources.files("islandgrid.configs").joinpath(f"{name}.yaml").read_text()


def shipped_scenario(name: str = "table1") -> Scenario:
    return parse_scenario(shipped_config(name), f"<islandgrid.configs/{name}.yaml>")
