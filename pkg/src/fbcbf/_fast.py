"""Compiled evaluation of the chain model for the simulation hot loop.

Mirrors :mod:`fbcbf.kinematics` / :mod:`fbcbf.dynamics` (which stay the
reference implementation and are used to test these kernels).
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _rpy(phi, theta, psi):
    cphi, sphi = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    cpsi, spsi = np.cos(psi), np.sin(psi)
    R = np.empty((3, 3))
    R[0, 0] = cpsi * cth
    R[0, 1] = -spsi * cphi + cpsi * sth * sphi
    R[0, 2] = spsi * sphi + cpsi * cphi * sth
    R[1, 0] = spsi * cth
    R[1, 1] = cpsi * cphi + sphi * sth * spsi
    R[1, 2] = -cpsi * sphi + sth * spsi * cphi
    R[2, 0] = -sth
    R[2, 1] = cth * sphi
    R[2, 2] = cth * cphi
    return R


@njit(cache=True)
def _axis_angle(a, ang):
    c, s = np.cos(ang), np.sin(ang)
    v = 1.0 - c
    R = np.empty((3, 3))
    R[0, 0] = c + a[0] * a[0] * v
    R[0, 1] = a[0] * a[1] * v - a[2] * s
    R[0, 2] = a[0] * a[2] * v + a[1] * s
    R[1, 0] = a[1] * a[0] * v + a[2] * s
    R[1, 1] = c + a[1] * a[1] * v
    R[1, 2] = a[1] * a[2] * v - a[0] * s
    R[2, 0] = a[2] * a[0] * v - a[1] * s
    R[2, 1] = a[2] * a[1] * v + a[0] * s
    R[2, 2] = c + a[2] * a[2] * v
    return R


@njit(cache=True)
def _mv(R, x):
    out = np.empty(3)
    for i in range(3):
        out[i] = R[i, 0] * x[0] + R[i, 1] * x[1] + R[i, 2] * x[2]
    return out


@njit(cache=True)
def _mtv(R, x):
    out = np.empty(3)
    for i in range(3):
        out[i] = R[0, i] * x[0] + R[1, i] * x[1] + R[2, i] * x[2]
    return out


@njit(cache=True)
def _mm(A, B):
    out = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]
    return out


@njit(cache=True)
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit(cache=True)
def frames(q, offsets, axes, ee_offset, ee_rot):
    nj = offsets.shape[0]
    Rs = np.empty((nj + 1, 3, 3))
    org = np.empty((nj + 1, 3))
    zax = np.empty((nj, 3))
    R = _rpy(q[3], q[4], q[5])
    Rs[0] = R
    org[0] = q[:3]
    p = q[:3].copy()
    for j in range(nj):
        o = p + _mv(R, offsets[j])
        zax[j] = _mv(R, axes[j])
        R = _mm(R, _axis_angle(axes[j], q[6 + j]))
        p = o
        Rs[j + 1] = R
        org[j + 1] = o
    xe = p + _mv(R, ee_offset)
    Re = _mm(R, ee_rot)
    return Rs, org, zax, xe, Re


@njit(cache=True)
def point_jacobian(Rs, org, zax, body, P, n):
    J = np.zeros((6, n))
    Rv = Rs[0]
    r = P - org[0]
    for c in range(3):
        col = Rv[:, c].copy()
        for i in range(3):
            J[i, c] = col[i]
            J[3 + i, 3 + c] = col[i]
        rc = _cross(col, r)  # -(r x col) = col x r
        for i in range(3):
            J[i, 3 + c] = rc[i]
    for j in range(body):
        z = zax[j]
        v = _cross(z, P - org[j + 1])
        for i in range(3):
            J[i, 6 + j] = v[i]
            J[3 + i, 6 + j] = z[i]
    return J


@njit(cache=True)
def wrench_to_generalized(Rs, org, zax, body, P, F, N, n):
    Q = np.zeros(n)
    Rv = Rs[0]
    f = _mtv(Rv, F)
    m = _mtv(Rv, _cross(P - org[0], F) + N)
    for i in range(3):
        Q[i] = f[i]
        Q[3 + i] = m[i]
    for j in range(body):
        t = _cross(P - org[j + 1], F) + N
        z = zax[j]
        Q[6 + j] = z[0] * t[0] + z[1] * t[1] + z[2] * t[2]
    return Q


@njit(cache=True)
def evaluate(q, zeta, offsets, axes, ee_offset, ee_rot,
             masses, coms, inertias, weights, buoys, cobs, added, lin, quad, jdamp):
    """Return ``(x_e, R_e, J, M, Cz, Dz, g, Rv)`` for one state."""
    nj = offsets.shape[0]
    n = 6 + nj
    Rs, org, zax, xe, Re = frames(q, offsets, axes, ee_offset, ee_rot)
    J = point_jacobian(Rs, org, zax, nj, xe, n)

    M = np.zeros((n, n))
    Cz = np.zeros(n)
    g = np.zeros(n)
    Rv = Rs[0]
    w = _mv(Rv, zeta[3:6])
    v_o = _mv(Rv, zeta[:3])
    a_o = _cross(w, v_o)
    alpha = np.zeros(3)
    ez = np.array([0.0, 0.0, 1.0])
    zero = np.zeros(3)
    for k in range(nj + 1):
        if k > 0:
            d = org[k] - org[k - 1]
            a_o = a_o + _cross(alpha, d) + _cross(w, _cross(w, d))
            zq = zax[k - 1] * zeta[5 + k]
            alpha = alpha + _cross(w, zq)
            w = w + zq
        R = Rs[k]
        c = org[k] + _mv(R, coms[k])
        Iw = _mm(_mm(R, inertias[k]), R.T.copy())
        Jc = point_jacobian(Rs, org, zax, k, c, n)
        m = masses[k]
        for a in range(n):
            for b in range(a, n):
                s = m * (Jc[0, a] * Jc[0, b] + Jc[1, a] * Jc[1, b] + Jc[2, a] * Jc[2, b])
                for i in range(3):
                    for l in range(3):
                        s += Jc[3 + i, a] * Iw[i, l] * Jc[3 + l, b]
                M[a, b] += s
        r = c - org[k]
        a_c = a_o + _cross(alpha, r) + _cross(w, _cross(w, r))
        Nk = _mv(Iw, alpha) + _cross(w, _mv(Iw, w))
        Cz += wrench_to_generalized(Rs, org, zax, k, c, m * a_c, Nk, n)
        cb = org[k] + _mv(R, cobs[k])
        g -= wrench_to_generalized(Rs, org, zax, k, c, weights[k] * ez, zero, n)
        g -= wrench_to_generalized(Rs, org, zax, k, cb, -buoys[k] * ez, zero, n)
    for a in range(n):
        for b in range(a + 1, n):
            M[b, a] = M[a, b]
    for i in range(6):
        M[i, i] += added[i]
    p = added * zeta[:6]
    Cz[:3] += _cross(zeta[3:6], p[:3])
    Cz[3:6] += _cross(zeta[3:6], p[3:]) + _cross(zeta[:3], p[:3])

    Dz = np.empty(n)
    for i in range(6):
        Dz[i] = (lin[i] + quad[i] * abs(zeta[i])) * zeta[i]
    for j in range(nj):
        Dz[6 + j] = jdamp[j] * zeta[6 + j]
    return xe, Re, J, M, Cz, Dz, g, Rv


@njit(cache=True)
def _current_delta(zeta, Rv, t, lin, quad, cur_amp, cur_period, cur_dir, dbar):
    """Extra drag from the sea current, clipped to the per-DoF bound."""
    delta = np.zeros(zeta.shape[0])
    if cur_amp != 0.0:
        vc = _mtv(Rv, cur_amp * np.sin(2.0 * np.pi * t / cur_period) * cur_dir)
        for i in range(3):
            vr = zeta[i] - vc[i]
            d = (lin[i] + quad[i] * abs(vr)) * vr - (lin[i] + quad[i] * abs(zeta[i])) * zeta[i]
            delta[i] = min(max(d, -dbar[i]), dbar[i])
    return delta


@njit(cache=True)
def plant_rhs(q, zeta, tau, t, offsets, axes, ee_offset, ee_rot, masses, coms, inertias,
              weights, buoys, cobs, added, lin, quad, jdamp,
              k_exp, k_stiff, c_t, cur_amp, cur_period, cur_dir, dbar):
    """Coupled equations of motion with contact and sea-current drag.

    Returns ``(qdot, zetadot, lam, delta, ok)``; ``ok`` is False at the
    Euler-angle singularity.
    """
    n = q.shape[0]
    xe, Re, J, M, Cz, Dz, g, Rv = evaluate(q, zeta, offsets, axes, ee_offset, ee_rot,
                                           masses, coms, inertias, weights, buoys, cobs,
                                           added, lin, quad, jdamp)
    lam = np.zeros(6)
    chi = xe[0]
    if chi >= 0.0:
        lam[0] = k_stiff * chi ** k_exp
        if c_t != 0.0:
            for i in range(1, 3):
                s = 0.0
                for j in range(n):
                    s += J[i, j] * zeta[j]
                lam[i] = c_t * s
    delta = _current_delta(zeta, Rv, t, lin, quad, cur_amp, cur_period, cur_dir, dbar)
    rhs = tau - Cz - Dz - g - delta
    for j in range(n):
        s = 0.0
        for i in range(6):
            s += J[i, j] * lam[i]
        rhs[j] -= s
    zdot = np.linalg.solve(M, rhs)
    qdot = zeta.copy()
    qdot[:3] = _mv(Rv, zeta[:3])
    phi, theta = q[3], q[4]
    ok = abs(theta) < np.pi / 2 - 1e-3
    cphi, sphi = np.cos(phi), np.sin(phi)
    cth, tth = np.cos(theta), np.tan(theta)
    p_, q_, r_ = zeta[3], zeta[4], zeta[5]
    qdot[3] = p_ + sphi * tth * q_ + cphi * tth * r_
    qdot[4] = cphi * q_ - sphi * r_
    qdot[5] = (sphi * q_ + cphi * r_) / cth
    return qdot, zdot, lam, delta, ok


@njit(cache=True)
def rk4_step(q, zeta, tau, t, dt, offsets, axes, ee_offset, ee_rot, masses, coms, inertias,
             weights, buoys, cobs, added, lin, quad, jdamp,
             k_exp, k_stiff, c_t, cur_amp, cur_period, cur_dir, dbar):
    """Classical RK4 with the contact wrench recomputed at every stage."""
    h = 0.5 * dt
    k1q, k1z, _, _, ok1 = plant_rhs(q, zeta, tau, t, offsets, axes, ee_offset, ee_rot, masses, coms,
                                    inertias, weights, buoys, cobs, added, lin, quad, jdamp,
                                    k_exp, k_stiff, c_t, cur_amp, cur_period, cur_dir, dbar)
    k2q, k2z, _, _, ok2 = plant_rhs(q + h * k1q, zeta + h * k1z, tau, t + h, offsets, axes, ee_offset,
                                    ee_rot, masses, coms, inertias, weights, buoys, cobs, added, lin,
                                    quad, jdamp, k_exp, k_stiff, c_t, cur_amp, cur_period, cur_dir, dbar)
    k3q, k3z, _, _, ok3 = plant_rhs(q + h * k2q, zeta + h * k2z, tau, t + h, offsets, axes, ee_offset,
                                    ee_rot, masses, coms, inertias, weights, buoys, cobs, added, lin,
                                    quad, jdamp, k_exp, k_stiff, c_t, cur_amp, cur_period, cur_dir, dbar)
    k4q, k4z, _, _, ok4 = plant_rhs(q + dt * k3q, zeta + dt * k3z, tau, t + dt, offsets, axes,
                                    ee_offset, ee_rot, masses, coms, inertias, weights, buoys, cobs,
                                    added, lin, quad, jdamp, k_exp, k_stiff, c_t, cur_amp, cur_period,
                                    cur_dir, dbar)
    qn = q + dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    zn = zeta + dt / 6.0 * (k1z + 2.0 * k2z + 2.0 * k3z + k4z)
    return qn, zn, ok1 and ok2 and ok3 and ok4


@njit(cache=True)
def _softmin(b, eta):
    m = b.min()
    s = 0.0
    for i in range(b.shape[0]):
        s += np.exp(-eta * (b[i] - m))
    return m - np.log(s) / eta


@njit(cache=True)
def task_state(q, zeta, fd, pd, Rd, M_lower, M_upper, eta, k_exp, k_stiff, c_t,
               offsets, axes, ee_offset, ee_rot, masses, coms, inertias, weights, buoys, cobs,
               added, lin, quad, jdamp):
    """True-state quantities: ``(x_e, lam, chi, e, b, b_k, kinetic energy, R_v)``."""
    n = q.shape[0]
    xe, Re, J, M, Cz, Dz, g, Rv = evaluate(q, zeta, offsets, axes, ee_offset, ee_rot, masses, coms,
                                           inertias, weights, buoys, cobs, added, lin, quad, jdamp)
    lam = np.zeros(6)
    chi = xe[0]
    if chi >= 0.0:
        lam[0] = k_stiff * chi ** k_exp
        if c_t != 0.0:
            for i in range(1, 3):
                s = 0.0
                for j in range(n):
                    s += J[i, j] * zeta[j]
                lam[i] = c_t * s
    e = _errors(lam[0], xe, Re, fd, pd, Rd)
    b = (e + M_lower) * (M_upper - e)
    ke = 0.5 * (zeta @ (M @ zeta))
    return xe, lam, chi, e, b, _softmin(b, eta), ke, Rv


@njit(cache=True)
def _errors(f, xe, Re, fd, pd, Rd):
    e = np.empty(6)
    e[0] = f - fd
    e[1] = xe[1] - pd[0]
    e[2] = xe[2] - pd[1]
    a, c = Re, Rd
    s0 = s1 = s2 = 0.0
    for k in range(3):
        s0 += a[1, k] * c[2, k] - a[2, k] * c[1, k]
        s1 += a[2, k] * c[0, k] - a[0, k] * c[2, k]
        s2 += a[0, k] * c[1, k] - a[1, k] * c[0, k]
    e[3] = 0.5 * s0
    e[4] = 0.5 * s1
    e[5] = 0.5 * s2
    return e


@njit(cache=True)
def _project(tau_des, A, c, m):
    """Closest point to ``tau_des`` in ``{A tau >= c}`` for ``m <= 2`` rows."""
    n = tau_des.shape[0]
    active = np.zeros(2)
    viol = np.empty(m)
    ok_all = True
    for i in range(m):
        viol[i] = A[i] @ tau_des - c[i]
        if viol[i] < -1e-12:
            ok_all = False
    if ok_all:
        return tau_des.copy(), active, True
    cmax = 1.0
    for i in range(m):
        cmax = max(cmax, abs(c[i]))
    for i in range(m):
        if viol[i] >= 0.0:
            continue
        a = A[i]
        aa = a @ a
        if aa <= 1e-12:
            continue
        tau = tau_des + a * ((c[i] - a @ tau_des) / aa)
        good = True
        for j in range(m):
            if A[j] @ tau - c[j] < -1e-9 * cmax:
                good = False
        if good:
            active[i] = 1.0
            return tau, active, True
    if m == 2:
        g00 = A[0] @ A[0]
        g01 = A[0] @ A[1]
        g11 = A[1] @ A[1]
        det = g00 * g11 - g01 * g01
        if abs(det) > 1e-12 * max(1.0, g00 * g11):
            r0 = c[0] - A[0] @ tau_des
            r1 = c[1] - A[1] @ tau_des
            m0 = (g11 * r0 - g01 * r1) / det
            m1 = (g00 * r1 - g01 * r0) / det
            if m0 >= -1e-12 and m1 >= -1e-12:
                active[0] = 1.0
                active[1] = 1.0
                return tau_des + m0 * A[0] + m1 * A[1], active, True
    return tau_des.copy(), active, False


_SUBSETS = np.array([0, 1, 2, 4, 3, 5, 6, 7])


@njit(cache=True)
def _project3(x0, G, c):
    """``argmin |x - x0|^2`` s.t. ``G x >= c`` for three rows in R^3."""
    scale = max(1.0, np.abs(c).max())
    active = np.zeros(3)
    for mask in _SUBSETS:
        idx = np.empty(3, dtype=np.int64)
        m = 0
        for i in range(3):
            if mask & (1 << i):
                idx[m] = i
                m += 1
        x = x0.copy()
        lam = np.zeros(3)
        ok = True
        if m > 0:
            Gs = np.empty((m, 3))
            rhs = np.empty(m)
            for a in range(m):
                Gs[a] = G[idx[a]]
                rhs[a] = c[idx[a]] - G[idx[a]] @ x0
            K = Gs @ Gs.T
            dprod = 1.0
            for a in range(m):
                dprod *= K[a, a]
            if abs(np.linalg.det(K)) <= 1e-14 * max(1.0, dprod):
                continue
            lm = np.linalg.solve(K, rhs)
            for a in range(m):
                if lm[a] < -1e-12 * scale:
                    ok = False
            if not ok:
                continue
            x = x0 + Gs.T @ lm
            for a in range(m):
                lam[idx[a]] = lm[a]
        for i in range(3):
            if G[i] @ x - c[i] < -1e-9 * scale:
                ok = False
        if ok:
            for i in range(3):
                active[i] = 1.0 if lam[i] > 1e-12 * scale else 0.0
            return x, active, True
    return x0.copy(), active, False


@njit(cache=True)
def control_step(q, zeta, lam, fd, fdd, pd, pdd, Rd, wd,
                 offsets, axes, ee_offset, ee_rot, masses, coms, inertias, weights, buoys, cobs,
                 added, lin, quad, jdamp,
                 M_lower, M_upper, kappa, gamma, mu, jl_gain, qmin, qmax, g_lo, g_mid, g_hi,
                 rho, d_guard, eta, gamma_e, kappa_d, kappa_v, dbar, ff, Kv, alpha, dt,
                 zr_prev, zr_dot_prev, has_prev, kin_on, dyn_on, tau_last, has_tau_last):
    """One pass of the three control layers on measured data.

    Mirrors ``ControllerSession`` in :mod:`fbcbf.sim`; see there for the
    meaning of each stage.  Returns ``(tau, tau_des, zeta_r, zeta_r_dot,
    xdot_c, xdot_star, kin_active, torque_active, flags, barriers)`` with
    ``flags = [torque_feasible, kin_feasible]`` and ``barriers = [b (6),
    b_k, b_vel, b_d, bk_rate]``.
    """
    n = q.shape[0]
    xe, Re, J, M, Cz, Dz, g, Rv = evaluate(q, zeta, offsets, axes, ee_offset, ee_rot, masses, coms,
                                           inertias, weights, buoys, cobs, added, lin, quad, jdamp)
    e = _errors(lam[0], xe, Re, fd, pd, Rd)
    # L = 0.5 (R_d R_e^T - tr(R_e^T R_d) I);  attitude rate block is L^T
    tr = 0.0
    for i in range(3):
        for k in range(3):
            tr += Re[i, k] * Rd[i, k]
    L = 0.5 * (Rd @ Re.T)
    for i in range(3):
        L[i, i] -= 0.5 * tr
    LT = L.T.copy()
    r = np.empty(6)
    r[0] = fdd
    r[1] = pdd[0]
    r[2] = pdd[1]
    r[3:] = L @ wd

    # nominal velocity
    xc = np.empty(6)
    xc[0] = (r[0] - gamma * e[0]) / g_mid
    xc[1] = r[1] - gamma * e[1]
    xc[2] = r[2] - gamma * e[2]
    xc[3:] = np.linalg.solve(LT, r[3:] - gamma * e[3:])

    # kinematic filter: scalar projections for force and surface position,
    # exact three-row QP over w for the attitude channels
    b = (e + M_lower) * (M_upper - e)
    H = (M_upper - M_lower) - 2.0 * e
    kin_active = np.zeros(6)
    kin_ok = True
    xs = xc.copy()
    if kin_on:
        hn = 0.0
        for i in range(6):
            hn += H[i] * H[i]
        if np.sqrt(hn) < 1e-9:
            kin_ok = False
        else:
            uc = np.empty(6)
            uc[:3] = xc[:3]
            uc[3:] = LT @ xc[3:]
            u = uc.copy()
            gains = np.empty(2)
            for i in range(6):
                if i == 0:
                    gains[0] = g_lo
                    gains[1] = g_hi
                    ng = 2
                else:
                    gains[0] = 1.0
                    ng = 1
                rhs = H[i] * r[i] - kappa[i] * b[i]
                psi = np.inf
                for j in range(ng):
                    psi = min(psi, H[i] * gains[j] * uc[i] - rhs)
                if psi < 0.0 and i < 3:
                    kin_active[i] = 1.0
                    lo = -np.inf
                    hi = np.inf
                    for j in range(ng):
                        aj = H[i] * gains[j]
                        if aj > 0.0:
                            lo = max(lo, rhs / aj)
                        elif aj < 0.0:
                            hi = min(hi, rhs / aj)
                        elif rhs > 0.0:
                            kin_ok = False
                    if lo > hi:
                        kin_ok = False
                    u[i] = min(max(uc[i], lo), hi)
            if kin_ok:
                xs = xc.copy()
                xs[:3] = u[:3]
                Gw = np.empty((3, 3))
                cw = np.empty(3)
                for i in range(3):
                    Gw[i] = H[3 + i] * LT[i]
                    cw[i] = H[3 + i] * r[3 + i] - kappa[3 + i] * b[3 + i]
                w_s, act_w, ok_w = _project3(xc[3:], Gw, cw)
                if ok_w:
                    xs[3:] = w_s
                    for i in range(3):
                        kin_active[3 + i] = act_w[i]
                else:
                    kin_ok = False
            if not kin_ok:
                xs = xc.copy()
                kin_active[:] = 0.0

    # redundancy resolution with the joint-limit secondary task
    x0 = np.zeros(n)
    for j in range(n - 6):
        mid = 0.5 * (qmin[j] + qmax[j])
        half = 0.5 * (qmax[j] - qmin[j])
        x0[6 + j] = -jl_gain * (q[6 + j] - mid) / (half * half)
    G = J @ J.T
    for i in range(6):
        G[i, i] += mu * mu
    y = np.linalg.solve(G, xs - J @ x0)
    zr = x0 + J.T @ y

    # filtered reference acceleration
    zrd = zr_dot_prev.copy()
    if has_prev:
        zrd += alpha * ((zr - zr_prev) / dt - zrd)

    Jtl = J.T @ lam
    tau_des = Cz + Dz + g + Jtl + M @ (zrd - Kv * (zeta - zr))

    # barriers on measured data
    bk = _softmin(b, eta)
    xi = (zeta - zr) / rho
    xi2 = xi @ xi
    b_vel = 0.5 * (1.0 - xi2)
    b_d = -0.5 * (zeta @ (M @ zeta)) + gamma_e * bk
    xdot = J @ zeta
    bmin = b.min()
    wsum = 0.0
    w = np.empty(6)
    for i in range(6):
        w[i] = np.exp(-eta * (b[i] - bmin))
        wsum += w[i]
    w /= wsum
    edot = np.empty(6)
    edot[1] = xdot[1] - r[1]
    edot[2] = xdot[2] - r[2]
    edot[3:] = LT @ xdot[3:] - r[3:]
    rate = 0.0
    for i in range(1, 6):
        rate += w[i] * H[i] * edot[i]
    wf = w[0] * H[0]
    rate += min(wf * (g_lo * xdot[0] - r[0]), wf * (g_hi * xdot[0] - r[0]))

    tau = tau_des.copy()
    tq_active = np.zeros(2)
    tq_ok = True
    if dyn_on:
        A = np.zeros((2, n))
        c = np.zeros(2)
        wc_z = 0.0
        for i in range(n):
            wc_z += dbar[i] * abs(zeta[i])
        A[0] = -zeta
        c[0] = -kappa_d * b_d - g @ zeta - zeta @ Jtl + wc_z - gamma_e * rate
        m = 1
        if xi2 >= d_guard:
            xr = xi / rho
            wv = np.linalg.solve(M, xr)
            wc_w = 0.0
            for i in range(n):
                wc_w += dbar[i] * abs(wv[i])
            kk = -Cz - Dz - g - Jtl
            cv = -kappa_v * b_vel + wv @ kk + wc_w
            if ff:
                cv -= xr @ zrd
            A[1] = -wv
            c[1] = cv
            m = 2
        tau, act, tq_ok = _project(tau_des, A, c, m)
        if tq_ok:
            tq_active = act
        else:
            tau = tau_last.copy() if has_tau_last else tau_des.copy()
    bar = np.empty(10)
    bar[:6] = b
    bar[6] = bk
    bar[7] = b_vel
    bar[8] = b_d
    bar[9] = rate
    flags = np.array([1.0 if tq_ok else 0.0, 1.0 if kin_ok else 0.0])
    return tau, tau_des, zr, zrd, xc, xs, kin_active, tq_active, flags, bar


@njit(cache=True)
def closed_loop(q, zeta, k0, m, total, dt, noise, fd, fdd, pd, pdd, Rd, wd,
                offsets, axes, ee_offset, ee_rot, masses, coms, inertias, weights, buoys, cobs,
                added, lin, quad, jdamp,
                M_lower, M_upper, kappa, gamma, mu, jl_gain, qmin, qmax, g_lo, g_mid, g_hi,
                rho, d_guard, eta, gamma_e, kappa_d, kappa_v, dbar_ctrl, ff, Kv, alpha,
                k_exp, k_stiff, c_t, cur_amp, cur_period, cur_dir, dbar,
                zr_prev, zr_dot, tau_last, flags_state, kin_on, dyn_on, data, limit):
    """Run ``m`` steps of measure, control, log and integrate from step ``k0``.

    Row ``i`` of ``data`` receives the log row of step ``k0 + i``.  The
    filter state arrays are updated in place.  Returns ``(q, zeta, rows,
    status)`` with status 0 (ok), 1 (Euler singularity) or 2 (divergence).
    """
    n = q.shape[0]
    for i in range(m):
        k = k0 + i
        t = k * dt
        xe, lam, chi, e, b, bk, ke, Rv = task_state(
            q, zeta, fd[i], pd[i], Rd[i], M_lower, M_upper, eta, k_exp, k_stiff, c_t,
            offsets, axes, ee_offset, ee_rot, masses, coms, inertias, weights, buoys, cobs,
            added, lin, quad, jdamp)
        delta = _current_delta(zeta, Rv, t, lin, quad, cur_amp, cur_period, cur_dir, dbar)
        qm = q + noise[i, :n]
        zm = zeta + noise[i, n:2 * n]
        lm = lam + noise[i, 2 * n:]
        tau, tau_des, zr, zrd, xc, xs, kin_act, tq_act, fl, bar = control_step(
            qm, zm, lm, fd[i], fdd[i], pd[i], pdd[i], Rd[i], wd[i],
            offsets, axes, ee_offset, ee_rot, masses, coms, inertias, weights, buoys, cobs,
            added, lin, quad, jdamp,
            M_lower, M_upper, kappa, gamma, mu, jl_gain, qmin, qmax, g_lo, g_mid, g_hi,
            rho, d_guard, eta, gamma_e, kappa_d, kappa_v, dbar_ctrl, ff, Kv, alpha, dt,
            zr_prev, zr_dot, flags_state[0] != 0, kin_on, dyn_on, tau_last, flags_state[1] != 0)
        zr_prev[:] = zr
        zr_dot[:] = zrd
        flags_state[0] = 1
        if dyn_on and fl[0]:
            tau_last[:] = tau
            flags_state[1] = 1

        # true-state diagnostics
        s = 0.0
        for j in range(n):
            d = (zeta[j] - zr[j]) / rho[j]
            s += d * d
        row = data[i]
        c = 0
        row[c] = t
        c += 1
        row[c:c + n] = q
        c += n
        row[c:c + n] = zeta
        c += n
        row[c:c + n] = zr
        c += n
        row[c:c + 3] = xe
        c += 3
        row[c] = lam[0]
        c += 1
        row[c:c + 6] = e
        c += 6
        row[c:c + 6] = b
        c += 6
        row[c] = bk
        row[c + 1] = 0.5 * (1.0 - s)
        row[c + 2] = gamma_e * bk - ke
        c += 3
        row[c:c + n] = tau
        c += n
        for j in range(6):
            row[c + j] = 1.0 if kin_act[j] else 0.0
        c += 6
        row[c] = 1.0 if tq_act[0] else 0.0
        row[c + 1] = 1.0 if tq_act[1] else 0.0
        row[c + 2] = 1.0 if fl[0] else 0.0
        row[c + 3] = 1.0 if fl[1] else 0.0
        row[c + 4] = 1.0 if chi < 0.0 else 0.0
        row[c + 5] = np.sqrt(delta @ delta)

        if k == total:
            return q, zeta, i + 1, 0
        qn, zn, ok = rk4_step(q, zeta, tau, t, dt, offsets, axes, ee_offset, ee_rot, masses, coms,
                              inertias, weights, buoys, cobs, added, lin, quad, jdamp,
                              k_exp, k_stiff, c_t, cur_amp, cur_period, cur_dir, dbar)
        if not ok:
            return q, zeta, i + 1, 1
        big = 0.0
        for j in range(n):
            if not (np.isfinite(qn[j]) and np.isfinite(zn[j])):
                return q, zeta, i + 1, 2
            big = max(big, abs(qn[j]), abs(zn[j]))
        if big > limit:
            return q, zeta, i + 1, 2
        q, zeta = qn, zn
    return q, zeta, m, 0
