"""Floating-base dynamics ``M zetadot + C zeta + D zeta + g + J^T lam + delta = tau``.

Inertial terms are assembled with Kane's method: every body contributes
through the partial velocities of its centre of mass, so the same expressions
hold for the body-frame vehicle velocities used in ``zeta``.  Vehicle added
mass is a constant body-frame matrix and adds the usual Kirchhoff coupling.

Inertial frame convention: ``z`` points down, so weight acts along ``+z``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _fast
from .kinematics import (
    ChainFrames,
    KinematicModel,
    _cross,
    chain_frames,
    point_jacobian,
    reference_model,
    skew,
)

GRAVITY = 9.81
_EZ = np.array([0.0, 0.0, 1.0])
_CSTEP = 1e-20


@dataclass(frozen=True)
class RigidBody:
    """Mass properties of one body, expressed in its own frame."""

    mass: float
    com: np.ndarray
    inertia: np.ndarray
    buoyancy: float = 0.0
    cob: np.ndarray | None = None

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        I = np.asarray(self.inertia, dtype=float)
        if I.shape == (3,):
            I = np.diag(I)
        if not np.allclose(I, I.T) or np.linalg.eigvalsh(I).min() <= 0:
            raise ValueError("inertia must be symmetric positive definite")
        object.__setattr__(self, "inertia", I)
        com = np.asarray(self.com, dtype=float)
        object.__setattr__(self, "com", com)
        object.__setattr__(self, "cob", com.copy() if self.cob is None else np.asarray(self.cob, dtype=float))

    @property
    def weight(self) -> float:
        return self.mass * GRAVITY


@dataclass(frozen=True)
class DynamicsModel:
    kin: KinematicModel
    vehicle: RigidBody
    links: tuple
    added_mass: np.ndarray = field(default_factory=lambda: np.zeros(6))
    linear_damping: np.ndarray = field(default_factory=lambda: np.zeros(6))
    quadratic_damping: np.ndarray = field(default_factory=lambda: np.zeros(6))
    joint_damping: np.ndarray | None = None

    def __post_init__(self):
        if len(self.links) != self.kin.n_joints:
            raise ValueError("one RigidBody per arm joint is required")
        for name in ("added_mass", "linear_damping", "quadratic_damping"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (6,) or np.any(v < 0):
                raise ValueError(f"{name} must be a non-negative 6-vector")
            object.__setattr__(self, name, v)
        jd = np.zeros(self.kin.n_joints) if self.joint_damping is None else np.asarray(self.joint_damping, dtype=float)
        if jd.shape != (self.kin.n_joints,) or np.any(jd < 0):
            raise ValueError("joint_damping must be non-negative, one entry per joint")
        object.__setattr__(self, "joint_damping", jd)
        object.__setattr__(self, "links", tuple(self.links))

    @property
    def n(self) -> int:
        return self.kin.n

    @property
    def bodies(self):
        return (self.vehicle,) + self.links

    def with_damping(self, linear=None, quadratic=None, joint=None) -> "DynamicsModel":
        return DynamicsModel(self.kin, self.vehicle, self.links, self.added_mass,
                             self.linear_damping if linear is None else linear,
                             self.quadratic_damping if quadratic is None else quadratic,
                             self.joint_damping if joint is None else joint)


def _com_world(fr: ChainFrames, k: int, body: RigidBody):
    return fr.origins[k] + fr.rotations[k] @ body.com


def mass_matrix(model: DynamicsModel, q, frames: ChainFrames | None = None):
    """Symmetric positive definite inertia matrix ``M(q)`` (n x n)."""
    fr = chain_frames(model.kin, q) if frames is None else frames
    n = model.n
    M = np.zeros((n, n), dtype=np.result_type(np.asarray(q), float))
    for k, body in enumerate(model.bodies):
        c = _com_world(fr, k, body)
        Jc = point_jacobian(fr, k, c, n)
        R = fr.rotations[k]
        Iw = R @ body.inertia @ R.T
        Jv, Jw = Jc[:3], Jc[3:]
        M += body.mass * (Jv.T @ Jv) + Jw.T @ Iw @ Jw
    M[:6, :6] += np.diag(model.added_mass)
    return M


def wrench_to_generalized(fr: ChainFrames, body: int, point, force, moment, n: int):
    """``Jc^T [F; N]`` for a force applied at ``point`` on ``body`` plus a pure moment."""
    Rv = fr.rotations[0]
    Q = np.zeros(n)
    Q[:3] = Rv.T @ force
    Q[3:6] = Rv.T @ (_cross(point - fr.origins[0], force) + moment)
    for j in range(body):
        Q[6 + j] = fr.axes[j] @ (_cross(point - fr.origins[j + 1], force) + moment)
    return Q


def coriolis_vector(model: DynamicsModel, q, zeta, frames: ChainFrames | None = None):
    """``C(q, zeta) zeta`` by a forward sweep of velocity-product accelerations."""
    fr = chain_frames(model.kin, q) if frames is None else frames
    zeta = np.asarray(zeta, dtype=float)
    n = model.n
    Rv = fr.rotations[0]
    nu_lin, nu_ang, qd = zeta[:3], zeta[3:6], zeta[6:]
    w = Rv @ nu_ang
    v_o = Rv @ nu_lin
    a_o = _cross(w, v_o)
    alpha = np.zeros(3)
    out = np.zeros(n)
    for k, body in enumerate(model.bodies):
        if k > 0:
            j = k - 1
            d = fr.origins[k] - fr.origins[k - 1]
            wxd = _cross(w, d)
            a_o = a_o + _cross(alpha, d) + _cross(w, wxd)
            zq = fr.axes[j] * qd[j]
            alpha = alpha + _cross(w, zq)
            w = w + zq
        R = fr.rotations[k]
        c = fr.origins[k] + R @ body.com
        r = c - fr.origins[k]
        a_c = a_o + _cross(alpha, r) + _cross(w, _cross(w, r))
        Iw = R @ body.inertia @ R.T
        N = Iw @ alpha + _cross(w, Iw @ w)
        out += wrench_to_generalized(fr, k, c, body.mass * a_c, N, n)
    p = model.added_mass * zeta[:6]
    out[:3] += _cross(nu_ang, p[:3])
    out[3:6] += _cross(nu_ang, p[3:]) + _cross(nu_lin, p[:3])
    return out


def mass_matrix_derivatives(model: DynamicsModel, q):
    """``dM/dq_m`` for each arm joint via complex-step differentiation.

    ``M`` does not depend on the vehicle pose, so only arm slices are nonzero.
    Returns an ``(n, n, n)`` array indexed ``[coordinate, row, col]``.
    """
    n = model.n
    q = np.asarray(q, dtype=float)
    dM = np.zeros((n, n, n))
    for m in range(6, n):
        qc = q.astype(complex)
        qc[m] += 1j * _CSTEP
        dM[m] = mass_matrix(model, qc).imag / _CSTEP
    return dM


def coriolis_matrix(model: DynamicsModel, q, zeta):
    """Coriolis matrix with ``Mdot - 2C`` skew-symmetric.

    Christoffel symbols over the arm coordinates plus the skew Kirchhoff block
    built from the body-frame vehicle momentum.
    """
    zeta = np.asarray(zeta, dtype=float)
    dM = mass_matrix_derivatives(model, q)
    C = 0.5 * (np.einsum("kij,k->ij", dM, zeta)
               + np.einsum("jik,k->ij", dM, zeta)
               - np.einsum("ijk,k->ij", dM, zeta))
    p = mass_matrix(model, q)[:6] @ zeta
    Sp1, Sp2 = skew(p[:3]), skew(p[3:])
    C[:3, 3:6] -= Sp1
    C[3:6, :3] -= Sp1
    C[3:6, 3:6] -= Sp2
    return C


def mass_matrix_rate(model: DynamicsModel, q, zeta):
    """``dM/dt`` along ``zeta`` (only joint rates move ``M``)."""
    dM = mass_matrix_derivatives(model, q)
    return np.einsum("kij,k->ij", dM[6:], np.asarray(zeta, dtype=float)[6:])


def damping_vector(model: DynamicsModel, zeta):
    """``D(zeta) zeta``: linear + quadratic drag on the vehicle, viscous joints."""
    zeta = np.asarray(zeta, dtype=float)
    out = np.empty_like(zeta)
    nu = zeta[:6]
    out[:6] = (model.linear_damping + model.quadratic_damping * np.abs(nu)) * nu
    out[6:] = model.joint_damping * zeta[6:]
    return out


def restoring_vector(model: DynamicsModel, q, frames: ChainFrames | None = None):
    """Gravity and buoyancy term ``g(q)`` (gradient of the potential)."""
    fr = chain_frames(model.kin, q) if frames is None else frames
    n = model.n
    g = np.zeros(n)
    zero = np.zeros(3)
    for k, body in enumerate(model.bodies):
        R = fr.rotations[k]
        c = fr.origins[k] + R @ body.com
        b = fr.origins[k] + R @ body.cob
        g -= wrench_to_generalized(fr, k, c, body.weight * _EZ, zero, n)
        g -= wrench_to_generalized(fr, k, b, -body.buoyancy * _EZ, zero, n)
    return g


def potential_energy(model: DynamicsModel, q):
    fr = chain_frames(model.kin, q)
    V = 0.0
    for k, body in enumerate(model.bodies):
        R = fr.rotations[k]
        V -= body.weight * (fr.origins[k] + R @ body.com)[2]
        V += body.buoyancy * (fr.origins[k] + R @ body.cob)[2]
    return V


def bias_forces(model: DynamicsModel, q, zeta, frames: ChainFrames | None = None):
    """Return ``(C zeta, D zeta, g)``."""
    fr = chain_frames(model.kin, q) if frames is None else frames
    return coriolis_vector(model, q, zeta, fr), damping_vector(model, zeta), restoring_vector(model, q, fr)


def contact_generalized_force(model: DynamicsModel, q, lam, frames: ChainFrames | None = None):
    """``J(q)^T lam`` for a wrench applied at the end-effector."""
    fr = chain_frames(model.kin, q) if frames is None else frames
    lam = np.asarray(lam, dtype=float)
    return wrench_to_generalized(fr, model.kin.n_joints, fr.ee_position, lam[:3], lam[3:], model.n)


def forward_dynamics(model: DynamicsModel, q, zeta, tau, lam, delta, frames: ChainFrames | None = None):
    """Solve the equations of motion for ``zetadot``."""
    fr = chain_frames(model.kin, q) if frames is None else frames
    M = mass_matrix(model, q, fr)
    Cz, Dz, g = bias_forces(model, q, zeta, fr)
    rhs = np.asarray(tau, dtype=float) - Cz - Dz - g - contact_generalized_force(model, q, lam, fr) - delta
    return np.linalg.solve(M, rhs)


def kinetic_energy(model: DynamicsModel, q, zeta):
    zeta = np.asarray(zeta, dtype=float)
    return 0.5 * zeta @ mass_matrix(model, q) @ zeta


def inertia_bounds(M):
    """``(lambda_min, lambda_max)`` of a symmetric inertia matrix."""
    ev = np.linalg.eigvalsh(M)
    return ev[0], ev[-1]


@dataclass
class SeaCurrentDisturbance:
    """Unmodelled drag from an inertial-frame water current.

    The plant sees drag on the velocity relative to the current; the
    difference from the nominal drag is the disturbance ``delta``, clipped
    per DoF to ``bound`` (scalar or one entry per DoF).
    """

    model: DynamicsModel
    amplitude: float = 0.1
    period: float = 50.0
    direction: np.ndarray = field(default_factory=lambda: np.ones(3))
    bound: float | np.ndarray = np.inf

    def current(self, t: float):
        if self.amplitude == 0.0:
            return np.zeros(3)
        return self.amplitude * np.sin(2.0 * np.pi * t / self.period) * np.asarray(self.direction, dtype=float)

    def realize(self, zeta, R_v, t: float):
        """``delta`` for body velocities ``zeta`` and vehicle rotation ``R_v``."""
        zeta = np.asarray(zeta, dtype=float)
        if self.amplitude == 0.0:
            return np.zeros(len(zeta))
        rel = zeta.copy()
        rel[:3] -= R_v.T @ self.current(t)
        delta = damping_vector(self.model, rel) - damping_vector(self.model, zeta)
        bound = np.broadcast_to(np.asarray(self.bound, dtype=float), delta.shape)
        return np.clip(delta, -bound, bound)

    def __call__(self, q, zeta, t: float, frames: ChainFrames | None = None):
        fr = frames if frames is not None else chain_frames(self.model.kin, q)
        return self.realize(zeta, fr.rotations[0], t)


def _rod(mass, length, radius):
    ixx = 0.5 * mass * radius**2
    iyy = mass * (3 * radius**2 + length**2) / 12.0
    return np.array([ixx, iyy, iyy])


def reference_dynamics(kin: KinematicModel | None = None, *, vehicle_mass: float = 20.0,
                       vehicle_inertia=(0.35, 0.55, 0.6), cob=(0.0, 0.0, -0.02),
                       link_masses=(0.4, 0.6, 0.45, 0.3), link_radius: float = 0.05,
                       added_mass=(6.0, 10.0, 12.0, 0.15, 0.25, 0.25),
                       linear_damping=(8.0, 12.0, 14.0, 1.0, 1.5, 1.5),
                       quadratic_damping=(18.0, 25.0, 28.0, 1.0, 1.5, 1.5),
                       joint_damping=(0.3, 0.3, 0.2, 0.05)) -> DynamicsModel:
    """Small work-class vehicle with a light arm.

    Every arm link and the vehicle are individually neutrally buoyant; the
    vehicle centre of buoyancy sits above its centre of gravity.  Links are
    uniform rods spanning the offset to the next joint (or the tool).
    """
    kin = reference_model() if kin is None else kin
    vehicle = RigidBody(vehicle_mass, com=np.zeros(3), inertia=vehicle_inertia,
                        buoyancy=vehicle_mass * GRAVITY, cob=np.asarray(cob, dtype=float))
    spans = list(kin.joint_offsets[1:]) + [kin.ee_offset]
    links = []
    for span, m in zip(spans, link_masses):
        span = np.asarray(span, dtype=float)
        L = float(np.linalg.norm(span))
        links.append(RigidBody(m, com=span / 2, inertia=_rod(m, max(L, 0.05), link_radius),
                               buoyancy=m * GRAVITY))
    return DynamicsModel(kin=kin, vehicle=vehicle, links=tuple(links),
                         added_mass=np.asarray(added_mass, dtype=float),
                         linear_damping=np.asarray(linear_damping, dtype=float),
                         quadratic_damping=np.asarray(quadratic_damping, dtype=float),
                         joint_damping=np.asarray(joint_damping, dtype=float))


class ModelTerms(NamedTuple):
    x_e: np.ndarray
    R_e: np.ndarray
    J: np.ndarray
    M: np.ndarray
    Cz: np.ndarray
    Dz: np.ndarray
    g: np.ndarray
    R_v: np.ndarray


class CompiledModel:
    """Packs a :class:`DynamicsModel` into arrays for the compiled kernel."""

    def __init__(self, model: DynamicsModel):
        self.model = model
        kin = model.kin
        bodies = model.bodies
        self._args = (
            kin.joint_offsets, kin.joint_axes, kin.ee_offset, kin.ee_rotation,
            np.array([b.mass for b in bodies]),
            np.array([b.com for b in bodies]),
            np.array([b.inertia for b in bodies]),
            np.array([b.weight for b in bodies]),
            np.array([b.buoyancy for b in bodies]),
            np.array([b.cob for b in bodies]),
            model.added_mass, model.linear_damping, model.quadratic_damping,
            model.joint_damping,
        )

    def evaluate(self, q, zeta) -> ModelTerms:
        return ModelTerms(*_fast.evaluate(np.ascontiguousarray(q, dtype=float),
                                          np.ascontiguousarray(zeta, dtype=float), *self._args))

    def contact_force(self, q, lam):
        """``J(q)^T lam`` with the kernel's Jacobian."""
        return self.evaluate(q, np.zeros(self.model.n)).J.T @ lam
