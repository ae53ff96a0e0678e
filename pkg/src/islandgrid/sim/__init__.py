from .engine import RunResult, SimulationError, assemble_system, integrate_step, run, run_noise_sweep
from .metrics import Metrics, WindowMetrics, check_properties, compute_metrics, settling_time
from .scenario import (ConfigError, ControllerConfig, Event, ObserverConfig, PlugConfig, Scenario,
                       load_scenario, parse_scenario, shipped_scenario)
from .trace import Trace, TraceRecord, export_csv

__all__ = [
    "ConfigError", "ControllerConfig", "Event", "Metrics", "ObserverConfig", "PlugConfig",
    "RunResult", "Scenario", "SimulationError", "Trace", "TraceRecord", "WindowMetrics",
    "assemble_system", "check_properties", "compute_metrics", "export_csv", "integrate_step", "load_scenario",
    "parse_scenario", "run", "run_noise_sweep", "settling_time", "shipped_scenario",
]
