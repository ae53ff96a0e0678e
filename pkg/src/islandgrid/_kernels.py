"""Compiled numerical kernels shared by the public API and the run engine.

Everything here works on flat float arrays so numba can compile it.  The
public modules wrap these functions with dataclass-based signatures; the
engine calls them directly on packed arrays.
"""
import math

import numpy as np
from numba import njit

# per-DG parameter vector layout
M_P, N_Q, OMEGA_C, R_F, L_F, C_F, R_C, L_C, K_PV, K_IV, K_PC, K_IC, OMEGA_B = range(13)
N_PARAMS = 13

# per-DG state vector layout
DELTA, PP, QQ, PHI_D, PHI_Q, GAMMA_D, GAMMA_Q, IL_D, IL_Q, VO_D, VO_Q, IO_D, IO_Q = range(13)
N_DG_STATES = 13

KCL_PROJECTION = 0
VIRTUAL_RESISTOR = 1


@njit(cache=True)
def dg_rhs(p, x, u, omega_n, vbd, vbq, omega_com, connected, out):
    """Time derivative of one DG's 13 states (local frame inputs)."""
    w = omega_n - p[M_P] * x[PP]
    vd_ref = u - p[N_Q] * x[QQ]
    vq_ref = 0.0
    vod = x[VO_D]
    voq = x[VO_Q]
    ild = x[IL_D]
    ilq = x[IL_Q]
    iod = x[IO_D]
    ioq = x[IO_Q]
    wb = p[OMEGA_B]
    lf = p[L_F]
    cf = p[C_F]
    # voltage PI with capacitor decoupling, no output-current feedforward
    ild_ref = -wb * cf * voq + p[K_PV] * (vd_ref - vod) + p[K_IV] * x[PHI_D]
    ilq_ref = wb * cf * vod + p[K_PV] * (vq_ref - voq) + p[K_IV] * x[PHI_Q]
    # current PI with inductor decoupling; ideal inverter
    vid = -wb * lf * ilq + p[K_PC] * (ild_ref - ild) + p[K_IC] * x[GAMMA_D]
    viq = wb * lf * ild + p[K_PC] * (ilq_ref - ilq) + p[K_IC] * x[GAMMA_Q]

    out[DELTA] = w - omega_com
    out[PP] = p[OMEGA_C] * (vod * iod + voq * ioq - x[PP])
    out[QQ] = p[OMEGA_C] * (voq * iod - vod * ioq - x[QQ])
    out[PHI_D] = vd_ref - vod
    out[PHI_Q] = vq_ref - voq
    out[GAMMA_D] = ild_ref - ild
    out[GAMMA_Q] = ilq_ref - ilq
    out[IL_D] = -p[R_F] / lf * ild + w * ilq + (vid - vod) / lf
    out[IL_Q] = -p[R_F] / lf * ilq - w * ild + (viq - voq) / lf
    out[VO_D] = w * voq + (ild - iod) / cf
    out[VO_Q] = -w * vod + (ilq - ioq) / cf
    if connected:
        lc = p[L_C]
        out[IO_D] = -p[R_C] / lc * iod + w * ioq + (vod - vbd) / lc
        out[IO_Q] = -p[R_C] / lc * ioq - w * iod + (voq - vbq) / lc
    else:
        out[IO_D] = 0.0
        out[IO_Q] = 0.0


@njit(cache=True)
def vdot_od(p, x, omega):
    return omega * x[VO_Q] + (x[IL_D] - x[IO_D]) / p[C_F]


@njit(cache=True)
def lie_lf2_h(p, x, vbd, omega):
    """Second Lie derivative of v_od along the drift, omega frozen."""
    cf = p[C_F]
    lf = p[L_F]
    lc = p[L_C]
    kpc = p[K_PC]
    cl = cf * lf
    return (
        (-omega * omega - (kpc * p[K_PV] + 1.0) / cl - 1.0 / (cf * lc)) * x[VO_D]
        - p[OMEGA_B] * kpc / lf * x[VO_Q]
        + p[R_C] / (cf * lc) * x[IO_D]
        - 2.0 * omega / cf * x[IO_Q]
        - (p[R_F] + kpc) / cl * x[IL_D]
        + (2.0 * omega - p[OMEGA_B]) / cf * x[IL_Q]
        - kpc * p[K_PV] * p[N_Q] / cl * x[QQ]
        + kpc * p[K_IV] / cl * x[PHI_D]
        + p[K_IC] / cl * x[GAMMA_D]
        + vbd / (cf * lc)
    )


@njit(cache=True)
def lie_lg_lf_h(p):
    return p[K_PC] * p[K_PV] / (p[C_F] * p[L_F])


@njit(cache=True)
def rotate(delta, a, b):
    """Rotate (a, b) by +delta."""
    c = math.cos(delta)
    s = math.sin(delta)
    return c * a - s * b, s * a + c * b


@njit(cache=True)
def resolve_bus_voltages(x, par, omega_n, dg_bus, dg_on, line_from, line_to, line_r,
                         line_l, load_bus, load_r, load_l, load_on, minv, kappa,
                         method, r_virtual, leader):
    """Bus DQ voltages in the common frame and the common frequency.

    ``method`` selects either the KCL projection (bus voltages chosen so the
    net injection at every bus decays at rate ``kappa``) or the virtual
    resistor (v = r_virtual * net injection).
    """
    n_dg = par.shape[0]
    n_bus = minv.shape[0]
    n_line = line_from.shape[0]
    wcom = omega_n[leader] - par[leader, M_P] * x[N_DG_STATES * leader + PP]
    res = np.zeros((n_bus, 2))
    f0 = np.zeros((n_bus, 2))
    for i in range(n_dg):
        if not dg_on[i]:
            continue
        o = N_DG_STATES * i
        d = x[o + DELTA]
        i_d, i_q = rotate(d, x[o + IO_D], x[o + IO_Q])
        v_d, v_q = rotate(d, x[o + VO_D], x[o + VO_Q])
        k = dg_bus[i]
        lc = par[i, L_C]
        res[k, 0] += i_d
        res[k, 1] += i_q
        f0[k, 0] += (-par[i, R_C] * i_d + v_d) / lc + wcom * i_q
        f0[k, 1] += (-par[i, R_C] * i_q + v_q) / lc - wcom * i_d
    o = N_DG_STATES * n_dg
    for m in range(n_line):
        i_d = x[o + 2 * m]
        i_q = x[o + 2 * m + 1]
        a = line_from[m]
        b = line_to[m]
        g_d = -line_r[m] * i_d / line_l[m] + wcom * i_q
        g_q = -line_r[m] * i_q / line_l[m] - wcom * i_d
        res[a, 0] -= i_d
        res[a, 1] -= i_q
        res[b, 0] += i_d
        res[b, 1] += i_q
        f0[a, 0] -= g_d
        f0[a, 1] -= g_q
        f0[b, 0] += g_d
        f0[b, 1] += g_q
    o += 2 * n_line
    for m in range(load_bus.shape[0]):
        if not load_on[m]:
            continue
        i_d = x[o + 2 * m]
        i_q = x[o + 2 * m + 1]
        a = load_bus[m]
        res[a, 0] -= i_d
        res[a, 1] -= i_q
        f0[a, 0] -= -load_r[m] * i_d / load_l[m] + wcom * i_q
        f0[a, 1] -= -load_r[m] * i_q / load_l[m] - wcom * i_d
    v = np.zeros((n_bus, 2))
    if method == VIRTUAL_RESISTOR:
        for a in range(n_bus):
            v[a, 0] = r_virtual * res[a, 0]
            v[a, 1] = r_virtual * res[a, 1]
    else:
        for a in range(n_bus):
            for b in range(n_bus):
                v[a, 0] += minv[a, b] * (f0[b, 0] + kappa * res[b, 0])
                v[a, 1] += minv[a, b] * (f0[b, 1] + kappa * res[b, 1])
    return v, wcom


@njit(cache=True)
def system_rhs(x, u, omega_n, par, dg_bus, dg_on, line_from, line_to, line_r, line_l,
               load_bus, load_r, load_l, load_on, minv, kappa, method, r_virtual, leader,
               out):
    n_dg = par.shape[0]
    v, wcom = resolve_bus_voltages(x, par, omega_n, dg_bus, dg_on, line_from, line_to,
                                   line_r, line_l, load_bus, load_r, load_l, load_on,
                                   minv, kappa, method, r_virtual, leader)
    for i in range(n_dg):
        o = N_DG_STATES * i
        k = dg_bus[i]
        vbd, vbq = rotate(-x[o + DELTA], v[k, 0], v[k, 1])
        dg_rhs(par[i], x[o:o + N_DG_STATES], u[i], omega_n[i], vbd, vbq, wcom, dg_on[i],
               out[o:o + N_DG_STATES])
    o = N_DG_STATES * n_dg
    for m in range(line_from.shape[0]):
        i_d = x[o + 2 * m]
        i_q = x[o + 2 * m + 1]
        a = line_from[m]
        b = line_to[m]
        out[o + 2 * m] = (-line_r[m] * i_d + v[a, 0] - v[b, 0]) / line_l[m] + wcom * i_q
        out[o + 2 * m + 1] = (-line_r[m] * i_q + v[a, 1] - v[b, 1]) / line_l[m] - wcom * i_d
    o += 2 * line_from.shape[0]
    for m in range(load_bus.shape[0]):
        if load_on[m]:
            i_d = x[o + 2 * m]
            i_q = x[o + 2 * m + 1]
            a = load_bus[m]
            out[o + 2 * m] = (-load_r[m] * i_d + v[a, 0]) / load_l[m] + wcom * i_q
            out[o + 2 * m + 1] = (-load_r[m] * i_q + v[a, 1]) / load_l[m] - wcom * i_d
        else:
            out[o + 2 * m] = 0.0
            out[o + 2 * m + 1] = 0.0


@njit(cache=True)
def rk4_advance(x, nsteps, dt, u, omega_n, par, dg_bus, dg_on, line_from, line_to, line_r,
                line_l, load_bus, load_r, load_l, load_on, minv, kappa, method, r_virtual,
                leader):
    """Advance ``x`` in place by ``nsteps`` classical RK4 steps.

    Returns -1 on success, otherwise the index of the first non-finite state.
    """
    n = x.shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    for _ in range(nsteps):
        system_rhs(x, u, omega_n, par, dg_bus, dg_on, line_from, line_to, line_r, line_l,
                   load_bus, load_r, load_l, load_on, minv, kappa, method, r_virtual,
                   leader, k1)
        for j in range(n):
            tmp[j] = x[j] + 0.5 * dt * k1[j]
        system_rhs(tmp, u, omega_n, par, dg_bus, dg_on, line_from, line_to, line_r, line_l,
                   load_bus, load_r, load_l, load_on, minv, kappa, method, r_virtual,
                   leader, k2)
        for j in range(n):
            tmp[j] = x[j] + 0.5 * dt * k2[j]
        system_rhs(tmp, u, omega_n, par, dg_bus, dg_on, line_from, line_to, line_r, line_l,
                   load_bus, load_r, load_l, load_on, minv, kappa, method, r_virtual,
                   leader, k3)
        for j in range(n):
            tmp[j] = x[j] + dt * k3[j]
        system_rhs(tmp, u, omega_n, par, dg_bus, dg_on, line_from, line_to, line_r, line_l,
                   load_bus, load_r, load_l, load_on, minv, kappa, method, r_virtual,
                   leader, k4)
        for j in range(n):
            x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            if not math.isfinite(x[j]):
                return j
    return -1


# --- extended-state Kalman-Bucy filter -------------------------------------


@njit(cache=True)
def _kb_deriv(xh, P, y, u, a, b, c, q, r_inv, dx, dP):
    innov = y
    for j in range(3):
        innov -= c[j] * xh[j]
    k = np.zeros(3)
    for i in range(3):
        for j in range(3):
            k[i] += P[i, j] * c[j] * r_inv
    cp = np.zeros(3)
    for j in range(3):
        for m in range(3):
            cp[j] += c[m] * P[m, j]
    for i in range(3):
        acc = b[i] * u + k[i] * innov
        for j in range(3):
            acc += a[i, j] * xh[j]
        dx[i] = acc
    for i in range(3):
        for j in range(3):
            acc = q[i, j] - k[i] * cp[j]
            for m in range(3):
                acc += a[i, m] * P[m, j] + P[i, m] * a[j, m]
            dP[i, j] = acc


@njit(cache=True)
def kb_step(xh, P, y0, y, u, dt, a, b, c, q, r_inv):
    """One RK4 step of the filter ODE and Riccati equation, in place.

    The measurement is interpolated linearly from ``y0`` to ``y`` across the
    step and ``u`` is held.  Returns the innovation at the end of the step.
    """
    ym = 0.5 * (y0 + y)
    dx1 = np.empty(3)
    dx2 = np.empty(3)
    dx3 = np.empty(3)
    dx4 = np.empty(3)
    dP1 = np.empty((3, 3))
    dP2 = np.empty((3, 3))
    dP3 = np.empty((3, 3))
    dP4 = np.empty((3, 3))
    _kb_deriv(xh, P, y0, u, a, b, c, q, r_inv, dx1, dP1)
    _kb_deriv(xh + 0.5 * dt * dx1, P + 0.5 * dt * dP1, ym, u, a, b, c, q, r_inv, dx2, dP2)
    _kb_deriv(xh + 0.5 * dt * dx2, P + 0.5 * dt * dP2, ym, u, a, b, c, q, r_inv, dx3, dP3)
    _kb_deriv(xh + dt * dx3, P + dt * dP3, y, u, a, b, c, q, r_inv, dx4, dP4)
    for i in range(3):
        xh[i] += dt / 6.0 * (dx1[i] + 2.0 * dx2[i] + 2.0 * dx3[i] + dx4[i])
        for j in range(3):
            P[i, j] += dt / 6.0 * (dP1[i, j] + 2.0 * dP2[i, j] + 2.0 * dP3[i, j] + dP4[i, j])
    for i in range(3):
        for j in range(i + 1, 3):
            s = 0.5 * (P[i, j] + P[j, i])
            P[i, j] = s
            P[j, i] = s
    return y - (c[0] * xh[0] + c[1] * xh[1] + c[2] * xh[2])


@njit(cache=True)
def is_spd3(P):
    """Positive-definiteness test on the diagonally scaled covariance.

    The raw covariance spans many decades, so the Cholesky test runs on the
    correlation matrix instead.
    """
    for i in range(3):
        if not (P[i, i] > 0.0) or not math.isfinite(P[i, i]):
            return False
    s0 = math.sqrt(P[0, 0])
    s1 = math.sqrt(P[1, 1])
    s2 = math.sqrt(P[2, 2])
    r01 = P[0, 1] / (s0 * s1)
    r02 = P[0, 2] / (s0 * s2)
    r12 = P[1, 2] / (s1 * s2)
    l11 = 1.0 - r01 * r01
    if not l11 > 0.0:
        return False
    l21 = r12 - r01 * r02
    l22 = 1.0 - r02 * r02 - l21 * l21 / l11
    return l22 > 0.0


@njit(cache=True)
def kb_batch(xh, P, y0, y, u, dt, a, b, c, q, r_inv, active, innov, spd_ok, nsub=1):
    h = dt / nsub
    for i in range(xh.shape[0]):
        if active[i]:
            dy = (y[i] - y0[i]) / nsub
            for k in range(nsub):
                innov[i] = kb_step(xh[i], P[i], y0[i] + k * dy, y0[i] + (k + 1) * dy, u[i], h,
                                   a, b[i], c, q, r_inv)
            spd_ok[i] = is_spd3(P[i])
        else:
            innov[i] = 0.0
            spd_ok[i] = True


# --- per-period diagnostics --------------------------------------------------


@njit(cache=True)
def diagnostics(x, u, omega_n, g_nom, par, dg_bus, dg_on, line_from, line_to, line_r, line_l,
                load_bus, load_r, load_l, load_on, minv, kappa, method, r_virtual, leader,
                vdot, lf2h, xi, vbd, omega, bus_v):
    """Ground-truth derivative terms for every DG; returns the common frequency.

    ``xi`` is the extended state as seen by a controller using the nominal
    input gain ``g_nom``.
    """
    v, wcom = resolve_bus_voltages(x, par, omega_n, dg_bus, dg_on, line_from, line_to,
                                   line_r, line_l, load_bus, load_r, load_l, load_on,
                                   minv, kappa, method, r_virtual, leader)
    for a in range(v.shape[0]):
        bus_v[a, 0] = v[a, 0]
        bus_v[a, 1] = v[a, 1]
    for i in range(par.shape[0]):
        o = N_DG_STATES * i
        xs = x[o:o + N_DG_STATES]
        k = dg_bus[i]
        vd, _ = rotate(-xs[DELTA], v[k, 0], v[k, 1])
        w = omega_n[i] - par[i, M_P] * xs[PP]
        vbd[i] = vd
        omega[i] = w
        vdot[i] = vdot_od(par[i], xs, w)
        lf2h[i] = lie_lf2_h(par[i], xs, vd, w)
        xi[i] = lf2h[i] + (lie_lg_lf_h(par[i]) - g_nom[i]) * u[i]
    return wcom


@njit(cache=True)
def lie_batch(xs, par, vbd, omega, out):
    for i in range(xs.shape[0]):
        out[i] = lie_lf2_h(par[i], xs[i], vbd[i], omega[i])
