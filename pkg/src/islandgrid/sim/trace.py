"""Per-control-period trace storage and CSV export."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

# per-DG columns, in output order
DG_FIELDS = (
    "v_od", "v_oq", "P", "Q", "V_n", "s", "e1", "e2", "xhat1", "xhat2", "xhat3",
    "vdot_true", "xi_true", "saturated", "y_meas", "innovation", "P11", "P22", "P33",
    "connected", "secondary",
)
RUN_FIELDS = ("V", "omega_com")


@dataclass(frozen=True)
class TraceRecord:
    t: float
    dg: dict
    V: float
    omega_com: float


class Trace:
    """Columnar trace: one row per control period."""

    def __init__(self, dg_names, n_rows):
        self.dg_names = tuple(dg_names)
        n = len(self.dg_names)
        self.t = np.zeros(n_rows)
        self.dg = {f: np.zeros((n_rows, n)) for f in DG_FIELDS}
        self.run = {f: np.zeros(n_rows) for f in RUN_FIELDS}
        self.n = 0

    def __len__(self):
        return self.n

    def __getitem__(self, field):
        if field == "t":
            return self.t[:self.n]
        if field in self.dg:
            return self.dg[field][:self.n]
        return self.run[field][:self.n]

    def append(self, t, values, V, omega_com):
        k = self.n
        self.t[k] = t
        for f, v in values.items():
            self.dg[f][k] = v
        self.run["V"][k] = V
        self.run["omega_com"][k] = omega_com
        self.n = k + 1

    def records(self):
        for k in range(self.n):
            yield TraceRecord(
                float(self.t[k]),
                {f: self.dg[f][k].copy() for f in DG_FIELDS},
                float(self.run["V"][k]),
                float(self.run["omega_com"][k]),
            )

    def header(self):
        cols = ["t"]
        for f in DG_FIELDS:
            cols += [f"{f}_{name}" for name in self.dg_names]
        return cols + list(RUN_FIELDS)

    def matrix(self) -> np.ndarray:
        parts = [self.t[:self.n, None]]
        parts += [self.dg[f][:self.n] for f in DG_FIELDS]
        parts += [self.run[f][:self.n, None] for f in RUN_FIELDS]
        return np.hstack(parts)


def export_csv(trace: Trace, path, fields=None, t_range=None):
    """Write the trace as CSV with 9 significant digits.

    ``fields`` restricts the per-DG columns (run-level columns are always
    kept); ``t_range`` keeps rows with ``t0 <= t < t1``.
    """
    header = trace.header()
    data = trace.matrix()
    if fields is not None:
        n_dg_cols = len(header) - len(RUN_FIELDS)
        keep = [0] + [i for i in range(1, n_dg_cols) if header[i].rsplit("_", 1)[0] in fields]
        keep += list(range(n_dg_cols, len(header)))
        header = [header[i] for i in keep]
        data = data[:, keep]
    if t_range is not None:
        t = data[:, 0]
        data = data[(t >= t_range[0]) & (t < t_range[1])]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, data, fmt="%.9g", delimiter=",", header=",".join(header), comments="")
    return path
