"""Command-line entry point: ``islandgrid run|sweep|validate``.

Exit codes: 0 success, 1 configuration error, 2 numerical blowup,
3 property violation in ``--check`` mode.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from .graph import TradeoffMode
from .sim import (ConfigError, SimulationError, check_properties, export_csv, load_scenario, run,
                  run_noise_sweep, shipped_scenario)
from .sim.scenario import shipped_config

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_CHECK = 0, 1, 2, 3

# per-panel trace slices written by --slices
SLICES = {
    "voltage": ("v_od", "v_oq", "V_n"),
    "power": ("P", "Q"),
    "observer": ("y_meas", "xhat1", "xhat2", "vdot_true", "xhat3", "xi_true"),
    "surface": ("s", "e1", "e2"),
}


def _scenario(path):
    p = Path(path)
    if not p.exists():
        try:
            shipped_config(path)
        except (FileNotFoundError, ConfigError):
            raise ConfigError(f"{path}: no such file or shipped config") from None
        return shipped_scenario(path)
    return load_scenario(p)


def _apply_overrides(sc, args):
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "dt", None) is not None:
        changes["dt_plant"] = args.dt
    if changes:
        sc = sc.with_(**changes)
    if getattr(args, "duration", None) is not None:
        sc = sc.truncated(args.duration)
    if getattr(args, "controller", None):
        sc = sc.with_controller(kind=args.controller)
    mode = getattr(args, "mode", None)
    if mode == "voltage":
        sc = sc.with_controller(tradeoff=TradeoffMode.VOLTAGE_ONLY)
    elif mode == "tradeoff":
        pv = sc.controller.pinning_v or (1.0,) * sc.n_dg
        sc = sc.with_controller(tradeoff=TradeoffMode.SHARING_TIGHT, pinning_v=tuple(pv))
    return sc


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _summary(result, extra=None):
    doc = {"wall_time_s": round(result.wall_time, 3), **_clean(result.metrics.as_dict())}
    doc["event_log"] = [f"{t:.4f}s {kind} {target or ''} {detail or ''}".rstrip()
                        for t, kind, target, detail in result.event_log]
    if extra:
        doc.update(extra)
    return yaml.safe_dump(doc, sort_keys=False)


def cmd_run(args):
    sc = _apply_overrides(_scenario(args.config), args)
    observer = None if args.observer is None else args.observer == "on"
    try:
        result = run(sc, observer=observer)
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.out and len(exc.trace):
            export_csv(exc.trace, args.out)
            print(f"partial trace written to {args.out}", file=sys.stderr)
        return EXIT_BLOWUP
    if args.out:
        export_csv(result.trace, args.out)
    if args.slices:
        d = Path(args.slices)
        d.mkdir(parents=True, exist_ok=True)
        for name, fields in SLICES.items():
            export_csv(result.trace, d / f"{name}.csv", fields=fields)
    violations = check_properties(result.metrics) if args.check else []
    print(_summary(result, {"violations": violations} if args.check else None), end="")
    if violations:
        for v in violations:
            print(f"check failed: {v}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_sweep(args):
    sc = _apply_overrides(_scenario(args.config), args)
    try:
        variances = [float(v) for v in args.variances.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--variances: cannot parse {args.variances!r}") from None
    if not variances or min(variances) < 0:
        raise ConfigError("--variances needs one or more values >= 0")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = run_noise_sweep(sc, variances)
    table = []
    status = EXIT_OK
    for (var, obs), res in results.items():
        tag = f"var{var:g}_{'eskbf' if obs else 'raw'}"
        row = {"variance": var, "observer": obs}
        if isinstance(res, SimulationError):
            row["error"] = str(res)
        else:
            export_csv(res.trace, out / f"{tag}.csv")
            (out / f"{tag}_metrics.yaml").write_text(_summary(res))
            ws = [w for w in res.metrics.windows if w.available and w.ss_std]
            row["max_ss_std"] = float(max(np.nanmax(w.ss_std) for w in ws))
            row["max_ss_mean_error"] = float(max(np.nanmax(np.abs(w.ss_mean_error)) for w in ws))
            row["all_settled"] = all(w.settled for w in res.metrics.windows[1:])
            if args.check and obs and check_properties(res.metrics, max_error=2.0):
                status = EXIT_CHECK
        table.append(row)
    print(yaml.safe_dump({"sweep": table}, sort_keys=False), end="")
    return status


def cmd_validate(args):
    sc = _scenario(args.config)
    print(f"{args.config}: ok ({sc.n_dg} DGs, {len(sc.network.buses)} buses, "
          f"{len(sc.events)} events, {sc.duration:g} s)")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="islandgrid", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log engine events")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("--config", required=True, help="scenario YAML or shipped config name")
    r.add_argument("--out", help="trace CSV path")
    r.add_argument("--seed", type=int)
    r.add_argument("--observer", choices=("on", "off"))
    r.add_argument("--controller", choices=("ftsm", "baseline"))
    r.add_argument("--mode", choices=("voltage", "tradeoff"))
    r.add_argument("--dt", type=float, help="plant step (s)")
    r.add_argument("--duration", type=float, help="truncate the run (s)")
    r.add_argument("--slices", help="directory for per-panel CSV slices")
    r.add_argument("--check", action="store_true", help="exit 3 if voltage restoration fails")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="noise sweep with and without the observer")
    s.add_argument("--config", required=True)
    s.add_argument("--variances", default="0.01,0.1,1")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--check", action="store_true")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate", help="parse and check a scenario file")
    v.add_argument("--config", required=True)
    v.set_defaults(func=cmd_validate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
