"""Extended-state Kalman-Bucy filter for one DG.

The filter tracks ``[v_od, dv_od/dt, xi]`` on the integrator chain
``y'' = xi + g0 * u`` from a noisy scalar measurement of ``v_od``.  Both the
estimate and the Riccati equation are advanced with RK4 at the control period.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .linearize import ExtendedModel

log = logging.getLogger(__name__)


class ObserverError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    Q_x: tuple = (1e-2, 1e2)
    Q_xi: float = 1e18
    R_x: float = 0.01
    sigma2_meas: float = 0.01
    seed: int = 0

    def __post_init__(self):
        qx = np.asarray(self.Q_x, dtype=float)
        if qx.shape == (2,):
            qx = np.diag(qx)
        if qx.shape != (2, 2) or not np.allclose(qx, qx.T):
            raise ObserverError("Q_x must be a symmetric 2x2 matrix or a length-2 diagonal")
        if np.linalg.eigvalsh(qx).min() < 0:
            raise ObserverError("Q_x must be positive semidefinite")
        if not self.Q_xi > 0:
            raise ObserverError(f"Q_xi must be > 0, got {self.Q_xi}")
        if not self.R_x > 0:
            raise ObserverError(f"R_x must be > 0, got {self.R_x}")
        if self.sigma2_meas < 0:
            raise ObserverError("sigma2_meas must be >= 0")
        object.__setattr__(self, "Q_x", qx)

    @classmethod
    def matched(cls, sigma2, **kw):
        """Measurement covariance matched to the injected noise variance."""
        return cls(R_x=sigma2 if sigma2 > 0 else 0.01, sigma2_meas=sigma2, **kw)

    @property
    def Q(self) -> np.ndarray:
        q = np.zeros((3, 3))
        q[:2, :2] = self.Q_x
        q[2, 2] = self.Q_xi
        return q


DEFAULT_P0 = np.diag([1.0, 1e4, 1e12])


@dataclass
class EskbfState:
    x_hat: np.ndarray
    P: np.ndarray
    model: ExtendedModel
    Q: np.ndarray
    R: float
    P0: np.ndarray = field(repr=False)
    resets: int = 0

    @property
    def K(self) -> np.ndarray:
        return self.P @ self.model.C_ex / self.R


def _check_spd(P, what):
    P = np.asarray(P, dtype=float)
    if P.shape != (3, 3):
        raise ObserverError(f"{what} must be 3x3, got shape {P.shape}")
    if not np.allclose(P, P.T, rtol=1e-9, atol=0.0):
        raise ObserverError(f"{what} is not symmetric")
    lam = np.linalg.eigvalsh(P)
    if lam.min() <= 0:
        raise ObserverError(f"{what} is not positive definite (eigenvalue {lam.min():.6g})")
    return P


def eskbf_init(model: ExtendedModel, noise: NoiseConfig, x0_guess=(0.0, 0.0, 0.0),
               P0=DEFAULT_P0) -> EskbfState:
    P0 = _check_spd(P0, "P0").copy()
    return EskbfState(np.array(x0_guess, dtype=float), P0.copy(), model, noise.Q,
                      float(noise.R_x), P0)


def eskbf_step(fs: EskbfState, y_meas, u, dt, y_prev=None) -> EskbfState:
    """Advance estimate and covariance by ``dt`` with ``u`` held.

    With ``y_prev`` the measurement is interpolated linearly from ``y_prev``
    to ``y_meas`` across the step; without it ``y_meas`` is held.

    If the covariance stops being positive definite it is reset to ``P0`` and
    a warning is logged.
    """
    if not dt > 0:
        raise ObserverError("dt must be > 0")
    x = fs.x_hat.copy()
    P = fs.P.copy()
    m = fs.model
    y0 = float(y_meas if y_prev is None else y_prev)
    K.kb_step(x, P, y0, float(y_meas), float(u), float(dt), np.asarray(m.A_ex), np.asarray(m.B_ex),
              np.asarray(m.C_ex), fs.Q, 1.0 / fs.R)
    resets = fs.resets
    if not K.is_spd3(P):
        log.warning("observer covariance lost positive definiteness; resetting to P0")
        P = fs.P0.copy()
        resets += 1
    return EskbfState(x, P, m, fs.Q, fs.R, fs.P0, resets)


def eskbf_reset_on_reconnect(fs: EskbfState, v_od_meas) -> EskbfState:
    return EskbfState(np.array([float(v_od_meas), 0.0, 0.0]), fs.P0.copy(), fs.model, fs.Q,
                      fs.R, fs.P0, fs.resets)
