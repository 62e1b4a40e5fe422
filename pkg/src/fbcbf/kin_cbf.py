"""Kinematic layer: nominal tracking velocity, error barriers, safety filter and
redundancy resolution.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .task_errors import TaskError

CHANNELS = ("f", "y", "z", "o1", "o2", "o3")


class DegenerateBarrier(ValueError):
    """Every channel sits at its barrier's critical point (``H == 0``)."""


class InfeasibleFilter(ValueError):
    pass


@dataclass(frozen=True)
class SafetyBounds:
    """Error corridor ``-M_lower < e < M_upper`` and the contact-force corridor."""

    M_lower: np.ndarray
    M_upper: np.ndarray
    f_floor: float
    f_ceiling: float

    def __post_init__(self):
        lo = np.asarray(self.M_lower, dtype=float)
        hi = np.asarray(self.M_upper, dtype=float)
        if lo.shape != (6,) or hi.shape != (6,):
            raise ValueError("M_lower and M_upper need six entries")
        if np.any(lo <= 0) or np.any(hi <= 0):
            raise ValueError("barrier limits must be positive")
        if not 0 < self.f_floor < self.f_ceiling:
            raise ValueError("need 0 < f_floor < f_ceiling")
        object.__setattr__(self, "M_lower", lo)
        object.__setattr__(self, "M_upper", hi)

    def contains(self, e) -> np.ndarray:
        e = np.asarray(e)
        return (e > -self.M_lower) & (e < self.M_upper)

    def corridor_checks(self, f_d_min: float, f_d_max: float):
        """``(floor_ok, ceiling_ok)`` for the force reference range."""
        return (-self.M_lower[0] + f_d_min > self.f_floor,
                self.M_upper[0] + f_d_max < self.f_ceiling)


@dataclass(frozen=True)
class KinCbfParams:
    gamma: float = 1.0
    kappa: np.ndarray = field(default_factory=lambda: np.full(6, 5.0))
    mu: float = 1e-2
    joint_limit_gain: float = 0.2

    def __post_init__(self):
        k = np.broadcast_to(np.asarray(self.kappa, dtype=float), (6,)).copy()
        if self.gamma <= 0 or np.any(k <= 0) or self.mu < 0 or self.joint_limit_gain < 0:
            raise ValueError("gains must be positive")
        object.__setattr__(self, "kappa", k)


def nominal_velocity(err: TaskError, A, r, gamma: float):
    """Task velocity giving ``edot = -gamma * e`` for the rate map ``edot = A xdot - r``.

    For the force channel this is ``(fdot_d - gamma e_f) / grad``, for the
    surface position ``pdot_d - gamma e_p`` and for the attitude
    ``L^-T (L w_d - gamma e_o)``.
    """
    e = err.e
    out = np.empty(6)
    out[0] = (r[0] - gamma * e[0]) / A[0, 0]
    out[1:3] = r[1:3] - gamma * e[1:3]
    out[3:] = np.linalg.solve(A[3:, 3:], r[3:] - gamma * e[3:])
    return out


def barrier_values(e, bounds: SafetyBounds):
    e = np.asarray(e, dtype=float)
    return (e + bounds.M_lower) * (bounds.M_upper - e)


def barrier_gradients(e, bounds: SafetyBounds):
    """``db_i/de_i = (M_upper - M_lower) - 2 e``."""
    return (bounds.M_upper - bounds.M_lower) - 2.0 * np.asarray(e, dtype=float)


@dataclass
class VelocityFilterResult:
    xdot: np.ndarray
    psi: np.ndarray
    active: np.ndarray
    correction: np.ndarray


def _interval_projection(u_c, a, c):
    """Closest ``u`` to ``u_c`` with ``a_j u >= c_j`` for all j (scalar ``u``)."""
    lo, hi = -np.inf, np.inf
    for aj, cj in zip(a, c):
        if aj > 0:
            lo = max(lo, cj / aj)
        elif aj < 0:
            hi = min(hi, cj / aj)
        elif cj > 0:
            raise InfeasibleFilter("zero-gain channel with violated constraint")
    if lo > hi:
        raise InfeasibleFilter("empty interval")
    return min(max(u_c, lo), hi)


def channel_constraints(e, A, r, bounds: SafetyBounds, kappa, grad_range=None):
    """Per-channel scalar constraints ``a u_i >= c`` in filter coordinates.

    Filter coordinates are ``u = [xdot_n, ydot, zdot, L^T w]`` so that every
    error rate is ``edot_i = g_i u_i - r_i`` with a scalar gain ``g_i``.  When
    ``grad_range`` is given the force gain is only known to lie in that
    interval and both endpoints are enforced.
    """
    b = barrier_values(e, bounds)
    H = barrier_gradients(e, bounds)
    gains = [[A[0, 0]] if grad_range is None else list(grad_range)] + [[1.0]] * 5
    cons = []
    for i in range(6):
        rhs = H[i] * r[i] - kappa[i] * b[i]
        cons.append(([H[i] * g for g in gains[i]], [rhs] * len(gains[i])))
    return cons, b, H


def safe_velocity_filter(xdot_c, e, A, r, bounds: SafetyBounds, kappa, grad_range=None,
                         coupled: bool = False):
    """Minimally modify ``xdot_c`` so that ``bdot_i + kappa_i b_i >= 0`` in every channel.

    Solves ``min |xdot - xdot_c|^2`` exactly.  ``psi_i`` is the barrier-rate
    margin at ``xdot_c``.  The force and surface-position constraints each
    involve one coordinate, so a violated channel is moved onto its boundary,
    ``l_i = -psi_i / (g_i H_i)``.  The attitude constraints share ``w``
    through ``L^T`` and are solved together by :func:`project_small`.
    ``active`` marks the constraints binding at the solution.

    ``coupled=True`` instead applies the single aggregated correction
    ``l = -a (sum psi) / |a|^2`` over the violated channels, with ``a`` their
    constraint gradients, measured in the filter coordinates ``u``.  It
    coincides with the exact filter when a single force or position channel
    is violated and is kept for comparison only.
    """
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), (6,))
    H = barrier_gradients(e, bounds)
    if np.linalg.norm(H) < 1e-9:
        raise DegenerateBarrier("barrier gradient vanishes in all channels")
    cons, _, _ = channel_constraints(e, A, r, bounds, kappa, grad_range)
    u_c = np.concatenate([xdot_c[:3], A[3:, 3:] @ xdot_c[3:]])
    u = u_c.copy()
    psi = np.empty(6)
    grad = np.empty(6)
    for i, (a, c) in enumerate(cons):
        margins = [aj * u_c[i] - cj for aj, cj in zip(a, c)]
        j = int(np.argmin(margins))
        psi[i], grad[i] = margins[j], a[j]
    active = psi < 0
    if coupled:
        if active.any():
            a_v = np.where(active, grad, 0.0)
            norm2 = a_v @ a_v
            if norm2 < 1e-18:
                raise InfeasibleFilter("violated channels have zero gradient")
            u = u_c - a_v * psi[active].sum() / norm2
        l_u = u - u_c
        correction = np.concatenate([l_u[:3], np.linalg.solve(A[3:, 3:], l_u[3:])])
        return VelocityFilterResult(xdot_c + correction, psi, active, correction)

    xdot = np.array(xdot_c, dtype=float)
    for i in range(3):
        if psi[i] < 0:
            xdot[i] = _interval_projection(u_c[i], *cons[i])
    # attitude channels share w through L^T: exact QP over w
    G = np.array([cons[i][0][0] * A[i, 3:] for i in range(3, 6)])
    c = np.array([cons[i][1][0] for i in range(3, 6)])
    xdot[3:], active[3:] = project_small(xdot[3:], G, c)
    return VelocityFilterResult(xdot, psi, active, xdot - xdot_c)


def project_small(x0, G, c, tol: float = 1e-12):
    """``argmin |x - x0|^2`` s.t. ``G x >= c`` by enumerating active sets (few rows).

    Returns ``(x, active)``; any active set whose multipliers are
    non-negative and whose point is feasible satisfies the KKT conditions,
    so the first one found is the unique optimum.
    """
    x0 = np.asarray(x0, dtype=float)
    m = len(c)
    scale = max(1.0, float(np.abs(c).max())) if m else 1.0
    for size in range(m + 1):
        for S in itertools.combinations(range(m), size):
            S = list(S)
            x = x0.copy()
            lam = np.zeros(0)
            if S:
                Gs = G[S]
                K = Gs @ Gs.T
                if abs(np.linalg.det(K)) <= 1e-14 * max(1.0, np.prod(np.diag(K))):
                    continue
                lam = np.linalg.solve(K, c[S] - Gs @ x0)
                if np.any(lam < -tol * scale):
                    continue
                x = x0 + Gs.T @ lam
            if np.all(G @ x - c >= -1e-9 * scale):
                active = np.zeros(m, dtype=bool)
                active[S] = lam > tol * scale
                return x, active
    raise InfeasibleFilter("no feasible active set")


def damped_pseudo_inverse(J, mu: float):
    """``J^T (J J^T + mu^2 I)^-1``."""
    m = J.shape[0]
    return J.T @ np.linalg.solve(J @ J.T + mu**2 * np.eye(m), np.eye(m))


def redundancy_resolution(xdot_star, J, mu: float, xdot0=None):
    """``zeta_r = J# xdot* + (I - J# J) xdot0``."""
    Jp = damped_pseudo_inverse(J, mu)
    zr = Jp @ xdot_star
    if xdot0 is not None:
        zr = zr + xdot0 - Jp @ (J @ xdot0)
    return zr


def joint_limit_task(q, q_min, q_max, gain: float):
    """Descent direction of ``sum ((q_m - mid) / half_range)^2`` (arm limits only); zero on the vehicle."""
    q = np.asarray(q, dtype=float)
    q_min = np.asarray(q_min, dtype=float)
    q_max = np.asarray(q_max, dtype=float)
    mid = 0.5 * (q_min + q_max)
    half = 0.5 * (q_max - q_min)
    out = np.zeros_like(q)
    out[6:] = -gain * (q[6:] - mid) / half**2
    return out
