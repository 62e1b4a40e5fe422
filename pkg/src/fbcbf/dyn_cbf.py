"""Dynamic layer: velocity-error barrier, smooth-min conjunction of the kinematic
barriers, energy barrier, and the robust torque filter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kin_cbf import SafetyBounds, barrier_gradients, barrier_values


class InfeasibleTorqueQP(ValueError):
    pass


@dataclass(frozen=True)
class VelocityBounds:
    rho: np.ndarray
    d_guard: float = 1e-4

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        if rho.ndim != 1 or np.any(rho <= 0):
            raise ValueError("rho must be a positive vector")
        if not 0 < self.d_guard < 1:
            raise ValueError("d_guard must lie in (0, 1)")
        object.__setattr__(self, "rho", rho)


@dataclass(frozen=True)
class DynCbfParams:
    """``delta_bar`` is either a scalar bound on ``|delta|`` or a per-DoF bound
    ``|delta_i| <= delta_bar_i``; the robust margins use the matching worst case."""

    eta: float = 2000.0
    gamma_energy: float = 100.0
    delta_bar: float | np.ndarray = 6.0
    kappa_d: float = 5.0
    kappa_v: float = 5.0
    ref_accel_feedforward: bool = False

    def __post_init__(self):
        db = np.asarray(self.delta_bar, dtype=float)
        if min(self.eta, self.gamma_energy, self.kappa_d, self.kappa_v) <= 0 or np.any(db < 0):
            raise ValueError("gains must be positive and delta_bar non-negative")
        object.__setattr__(self, "delta_bar", float(db) if db.ndim == 0 else db)

    def worst_case(self, v) -> float:
        """``max v.delta`` over admissible disturbances."""
        if np.ndim(self.delta_bar) == 0:
            return self.delta_bar * float(np.linalg.norm(v))
        return float(self.delta_bar @ np.abs(v))


@dataclass
class BarrierState:
    b_channels: np.ndarray
    b_k: float
    b_vel: float
    b_d: float
    J_bk: np.ndarray | None
    xi: np.ndarray
    bk_rate: float = 0.0


def velocity_barrier(zeta, zeta_r, rho):
    """``b = 0.5 (1 - |xi|^2)`` with ``xi = (zeta - zeta_r) / rho``."""
    xi = (np.asarray(zeta, dtype=float) - np.asarray(zeta_r, dtype=float)) / np.asarray(rho, dtype=float)
    return 0.5 * (1.0 - xi @ xi), xi


def softmin_barrier(b, eta: float):
    """``-(1/eta) log sum exp(-eta b_i)``, shifted so it cannot overflow."""
    b = np.asarray(b, dtype=float)
    m = b.min()
    return m - np.log(np.sum(np.exp(-eta * (b - m)))) / eta


def softmin_weights(b, eta: float):
    b = np.asarray(b, dtype=float)
    w = np.exp(-eta * (b - b.min()))
    return w / w.sum()


def energy_barrier(zeta, M, b_k: float, gamma_energy: float):
    zeta = np.asarray(zeta, dtype=float)
    return -0.5 * zeta @ M @ zeta + gamma_energy * b_k


def error_configuration_jacobian(J, A, T_inv):
    """``de/dq = A J T^-1`` for the error rate map ``edot = A xdot - r``."""
    return A @ J @ T_inv


def bk_jacobian(e, bounds: SafetyBounds, eta: float, de_dq):
    """Gradient of the smooth-min barrier w.r.t. the chain coordinates."""
    w = softmin_weights(barrier_values(e, bounds), eta)
    H = barrier_gradients(e, bounds)
    return (w * H) @ de_dq


@dataclass
class DynamicTerms:
    """Model quantities the torque filter needs at one state."""

    zeta: np.ndarray
    M: np.ndarray
    Cz: np.ndarray
    Dz: np.ndarray
    g: np.ndarray
    Jt_lam: np.ndarray


@dataclass
class TorqueFilterResult:
    tau: np.ndarray
    active: np.ndarray
    feasible: bool
    slack: np.ndarray


def torque_constraints(terms: DynamicTerms, barriers: BarrierState, params: DynCbfParams,
                       rho, d_guard: float = 0.0, zeta_r_dot=None):
    """Half-spaces ``a^T tau >= c`` for the energy and velocity barriers.

    Energy: ``-zeta.tau + g.zeta + zeta.J^T lam - W(zeta) + gamma bk_rate >= -kappa_d b_d``
    where ``bk_rate`` is ``db_k/dt`` along the current motion.
    Velocity: ``-w.(tau - C zeta - D zeta - g - J^T lam) - W(w) >= -kappa_v b``
    with ``w = M^-1 xi / rho``.  ``W`` is :meth:`DynCbfParams.worst_case`.
    Returns ``(A, c)`` with one row per retained constraint, plus a mask of
    which of the two constraints were retained.
    """
    zeta = terms.zeta
    rows, rhs, kept = [], [], np.zeros(2, dtype=bool)
    c_d = (-params.kappa_d * barriers.b_d - terms.g @ zeta - zeta @ terms.Jt_lam
           + params.worst_case(zeta) - params.gamma_energy * barriers.bk_rate)
    rows.append(-zeta)
    rhs.append(c_d)
    kept[0] = True

    xi = barriers.xi
    if xi @ xi >= d_guard:
        w = np.linalg.solve(terms.M, xi / rho)
        k = -terms.Cz - terms.Dz - terms.g - terms.Jt_lam
        c_v = -params.kappa_v * barriers.b_vel + w @ k + params.worst_case(w)
        if params.ref_accel_feedforward and zeta_r_dot is not None:
            c_v -= (xi / rho) @ zeta_r_dot
        rows.append(-w)
        rhs.append(c_v)
        kept[1] = True
    return np.array(rows), np.array(rhs), kept


def project_halfspaces(tau_des, A, c, tol: float = 1e-12):
    """Closest point to ``tau_des`` in ``{tau : A tau >= c}`` for at most two rows.

    Enumerates active sets; returns ``(tau, active_mask)`` or raises
    :class:`InfeasibleTorqueQP`.
    """
    tau_des = np.asarray(tau_des, dtype=float)
    m = len(c)
    if m > 2:
        raise ValueError("at most two constraints supported")
    viol = A @ tau_des - c
    if np.all(viol >= -tol):
        return tau_des.copy(), np.zeros(m, dtype=bool)
    for i in range(m):
        if viol[i] >= 0:
            continue
        a = A[i]
        aa = a @ a
        if aa <= tol:
            continue
        tau = tau_des + a * (c[i] - a @ tau_des) / aa
        if np.all(A @ tau - c >= -1e-9 * max(1.0, np.abs(c).max())):
            active = np.zeros(m, dtype=bool)
            active[i] = True
            return tau, active
    if m == 2:
        G = A @ A.T
        if abs(np.linalg.det(G)) > tol * max(1.0, G[0, 0] * G[1, 1]):
            mult = np.linalg.solve(G, c - A @ tau_des)
            if np.all(mult >= -1e-12):
                return tau_des + A.T @ mult, np.ones(2, dtype=bool)
    raise InfeasibleTorqueQP("energy and velocity constraints cannot both hold")


def safe_torque_filter(tau_des, terms: DynamicTerms, barriers: BarrierState, params: DynCbfParams,
                       rho, d_guard: float = 0.0, zeta_r_dot=None):
    """``argmin |tau - tau_des|^2`` subject to :func:`torque_constraints`."""
    A, c, kept = torque_constraints(terms, barriers, params, rho, d_guard, zeta_r_dot)
    tau, act = project_halfspaces(tau_des, A, c)
    active = np.zeros(2, dtype=bool)
    active[kept] = act
    slack = np.full(2, np.nan)
    slack[kept] = A @ tau - c
    return TorqueFilterResult(tau, active, True, slack)
