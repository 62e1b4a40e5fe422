"""Force / surface-position / orientation tracking errors and their rates.

Error stack order: ``e = [e_f, e_y, e_z, e_o1, e_o2, e_o3]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kinematics import euler_rate_matrix, rpy_to_rotation, skew

COND_LIMIT = 1e6


class SingularOrientationMap(ValueError):
    """The orientation-error Jacobian ``L`` is (nearly) rank deficient."""


@dataclass(frozen=True)
class Sinusoid:
    """``offset + amplitude * sin(2 pi t / period + phase)`` (period 0 -> constant)."""

    offset: float = 0.0
    amplitude: float = 0.0
    period: float = 0.0
    phase: float = 0.0

    def value(self, t: float) -> float:
        if self.period == 0.0:
            return self.offset
        return self.offset + self.amplitude * np.sin(2 * np.pi * t / self.period + self.phase)

    def rate(self, t: float) -> float:
        if self.period == 0.0 or self.amplitude == 0.0:
            return 0.0
        w = 2 * np.pi / self.period
        return self.amplitude * w * np.cos(w * t + self.phase)

    def bounds(self):
        a = abs(self.amplitude) if self.period else 0.0
        return self.offset - a, self.offset + a


def _sinusoid(x) -> Sinusoid:
    return x if isinstance(x, Sinusoid) else Sinusoid(float(x))


@dataclass(frozen=True)
class TaskReference:
    """Desired force, surface position ``(y, z)`` and attitude (roll/pitch/yaw)."""

    force: Sinusoid = field(default_factory=lambda: Sinusoid(1.0))
    y: Sinusoid = field(default_factory=Sinusoid)
    z: Sinusoid = field(default_factory=Sinusoid)
    attitude: tuple = field(default_factory=lambda: (Sinusoid(), Sinusoid(), Sinusoid()))

    def __post_init__(self):
        object.__setattr__(self, "force", _sinusoid(self.force))
        object.__setattr__(self, "y", _sinusoid(self.y))
        object.__setattr__(self, "z", _sinusoid(self.z))
        object.__setattr__(self, "attitude", tuple(_sinusoid(a) for a in self.attitude))

    def f_d(self, t):
        return self.force.value(t)

    def fdot_d(self, t):
        return self.force.rate(t)

    def p_d(self, t):
        return np.array([self.y.value(t), self.z.value(t)])

    def pdot_d(self, t):
        return np.array([self.y.rate(t), self.z.rate(t)])

    def rpy_d(self, t):
        return np.array([a.value(t) for a in self.attitude])

    def R_d(self, t):
        return rpy_to_rotation(self.rpy_d(t))

    def omega_d(self, t):
        """Inertial-frame angular velocity of ``R_d``."""
        eta = self.rpy_d(t)
        eta_dot = np.array([a.rate(t) for a in self.attitude])
        if not eta_dot.any():
            return np.zeros(3)
        w_body = np.linalg.solve(euler_rate_matrix(eta), eta_dot)
        return rpy_to_rotation(eta) @ w_body

    def force_range(self):
        return self.force.bounds()

    def sample(self, t):
        """``(f_d, fdot_d, p_d, pdot_d, R_d, omega_d)`` at time ``t``."""
        return (self.f_d(t), self.fdot_d(t), self.p_d(t), self.pdot_d(t), self.R_d(t),
                self.omega_d(t))


@dataclass
class TaskError:
    e_f: float
    e_p: np.ndarray
    e_o: np.ndarray

    @property
    def e(self):
        return np.concatenate([[self.e_f], self.e_p, self.e_o])


def orientation_error(R_e, R_d):
    """``0.5 * (n_e x n_d + o_e x o_d + a_e x a_d)`` over the matrix columns."""
    a, b = R_e, R_d
    return 0.5 * np.array([(a[1] * b[2] - a[2] * b[1]).sum(),
                           (a[2] * b[0] - a[0] * b[2]).sum(),
                           (a[0] * b[1] - a[1] * b[0]).sum()])


def L_matrix(R_e, R_d, check: bool = True):
    """``0.5 * sum_k S(c_e,k) S(c_d,k)`` over the columns of ``R_e`` and ``R_d``.

    Evaluated through ``S(a) S(b) = b a^T - (a.b) I``.
    """
    L = 0.5 * (R_d @ R_e.T - np.trace(R_e.T @ R_d) * np.eye(3))
    if check and abs(np.linalg.det(L)) < 1e-2 and np.linalg.cond(L) > COND_LIMIT:
        raise SingularOrientationMap("relative orientation too large: L is near singular")
    return L


def compute_errors(f: float, x_e, R_e, ref: TaskReference, t: float) -> TaskError:
    p_d = ref.p_d(t)
    return TaskError(
        e_f=float(f - ref.f_d(t)),
        e_p=np.array([x_e[1] - p_d[0], x_e[2] - p_d[1]]),
        e_o=orientation_error(R_e, ref.R_d(t)),
    )


def error_rate_map(ref: TaskReference, t: float, grad: float, L):
    """``(A, r)`` with ``edot = A @ xdot - r`` for the task velocity ``xdot``.

    ``A = blkdiag(grad, 1, 1, L^T)``; the attitude block is ``L^T`` because
    ``d/dt e_o = L^T w_e - L w_d`` for ``L`` as built by :func:`L_matrix`.
    """
    A = np.zeros((6, 6))
    A[0, 0] = grad
    A[1, 1] = A[2, 2] = 1.0
    A[3:, 3:] = L.T
    r = np.concatenate([[ref.fdot_d(t)], ref.pdot_d(t), L @ ref.omega_d(t)])
    return A, r


def error_rates(xdot, ref: TaskReference, t: float, grad: float, L):
    """Time derivative of :func:`compute_errors` for task velocity ``xdot``."""
    A, r = error_rate_map(ref, t, grad, L)
    return A @ np.asarray(xdot, dtype=float) - r
