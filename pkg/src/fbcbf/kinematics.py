"""Kinematics of a floating-base serial chain (vehicle + revolute arm).

Generalized coordinates are ``q = [eta1, eta2, q_m]`` with the vehicle position
``eta1``, roll/pitch/yaw ``eta2 = (phi, theta, psi)`` and arm joint angles
``q_m``.  Velocities ``zeta = [v, w, qdot_m]`` hold the vehicle linear and
angular velocity expressed in the vehicle body frame followed by joint rates.

Rotations use ``R = Rz(psi) @ Ry(theta) @ Rx(phi)``.

All routines accept complex-valued ``q_m`` so that derivatives can be taken by
complex-step differentiation (see :mod:`fbcbf.dynamics`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PITCH_GUARD = 1e-3


class RepresentationSingularity(ValueError):
    """Euler pitch too close to +-pi/2 for the vehicle velocity transform."""


def skew(d):
    """Skew-symmetric matrix with ``skew(d) @ w == cross(d, w)``."""
    d = np.asarray(d)
    return np.array([[0.0, -d[2], d[1]],
                     [d[2], 0.0, -d[0]],
                     [-d[1], d[0], 0.0]])


def _cross(a, b):
    # np.cross is slow for single 3-vectors
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rpy_to_rotation(eta2):
    """Rotation matrix ``Rz(psi) Ry(theta) Rx(phi)`` from ``(phi, theta, psi)``."""
    phi, theta, psi = eta2
    cphi, sphi = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    cpsi, spsi = np.cos(psi), np.sin(psi)
    return np.array([
        [cpsi * cth, -spsi * cphi + cpsi * sth * sphi, spsi * sphi + cpsi * cphi * sth],
        [spsi * cth, cpsi * cphi + sphi * sth * spsi, -cpsi * sphi + sth * spsi * cphi],
        [-sth, cth * sphi, cth * cphi],
    ])


def rotation_to_rpy(R):
    """Inverse of :func:`rpy_to_rotation` for ``|theta| < pi/2``."""
    return np.array([np.arctan2(R[2, 1], R[2, 2]),
                     -np.arcsin(np.clip(R[2, 0], -1.0, 1.0)),
                     np.arctan2(R[1, 0], R[0, 0])])


def euler_rate_matrix(eta2):
    """Map from body angular velocity to ``d/dt (phi, theta, psi)``."""
    phi, theta, _ = eta2
    if abs(np.real(theta)) >= np.pi / 2 - PITCH_GUARD:
        raise RepresentationSingularity(f"pitch {np.real(theta):.6f} rad too close to +-pi/2")
    cphi, sphi = np.cos(phi), np.sin(phi)
    cth, tth = np.cos(theta), np.tan(theta)
    return np.array([[1.0, sphi * tth, cphi * tth],
                     [0.0, cphi, -sphi],
                     [0.0, sphi / cth, cphi / cth]])


def velocity_transform(q_a):
    """6x6 map ``qdot_a = T(q_a) v`` from vehicle body velocities to pose rates."""
    q_a = np.asarray(q_a, dtype=float)
    T = np.zeros((6, 6))
    T[:3, :3] = rpy_to_rotation(q_a[3:6])
    T[3:, 3:] = euler_rate_matrix(q_a[3:6])
    return T


def full_velocity_transform(q):
    """``qdot = T_full(q) zeta`` for the whole chain (identity on arm joints)."""
    n = len(q)
    T = np.eye(n)
    T[:6, :6] = velocity_transform(q[:6])
    return T


def full_velocity_transform_inv(q):
    n = len(q)
    Ti = np.eye(n)
    Ti[:3, :3] = rpy_to_rotation(q[3:6]).T
    phi, theta, _ = q[3:6]
    cphi, sphi = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    # inverse of the Euler-rate matrix
    Ti[3:6, 3:6] = np.array([[1.0, 0.0, -sth],
                             [0.0, cphi, cth * sphi],
                             [0.0, -sphi, cth * cphi]])
    return Ti


@dataclass(frozen=True)
class KinematicModel:
    """Vehicle + revolute arm geometry.

    ``joint_offsets[j]`` is the origin of joint ``j`` expressed in the frame of
    its parent body (the vehicle for ``j == 0``); ``joint_axes[j]`` is the unit
    rotation axis in the joint's own frame.  All link frames are parallel to
    their parent at zero joint angle.  ``ee_offset`` locates the end-effector
    frame {E} in the last link frame; ``ee_rotation`` orients it.
    """

    joint_offsets: np.ndarray
    joint_axes: np.ndarray
    ee_offset: np.ndarray
    ee_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        offs = np.asarray(self.joint_offsets, dtype=float)
        axes = np.asarray(self.joint_axes, dtype=float)
        if offs.shape != axes.shape or offs.ndim != 2 or offs.shape[1] != 3:
            raise ValueError("joint_offsets and joint_axes must both be (n_joints, 3)")
        if offs.shape[0] < 1:
            raise ValueError("need at least one arm joint (n >= 7)")
        axes = axes / np.linalg.norm(axes, axis=1, keepdims=True)
        object.__setattr__(self, "joint_offsets", offs)
        object.__setattr__(self, "joint_axes", axes)
        object.__setattr__(self, "ee_offset", np.asarray(self.ee_offset, dtype=float))
        Re = np.asarray(self.ee_rotation, dtype=float)
        if not np.allclose(Re.T @ Re, np.eye(3), atol=1e-9):
            raise ValueError("ee_rotation must be orthonormal")
        object.__setattr__(self, "ee_rotation", Re)

    @property
    def n_joints(self) -> int:
        return self.joint_offsets.shape[0]

    @property
    def n(self) -> int:
        return 6 + self.n_joints


@dataclass
class EndEffectorState:
    position: np.ndarray
    rotation: np.ndarray
    xdot: np.ndarray | None = None

    @property
    def omega(self):
        return None if self.xdot is None else self.xdot[3:]


@dataclass
class ChainFrames:
    """World-frame placement of every body of the chain for one configuration.

    Index 0 is the vehicle, index ``j + 1`` is arm link ``j``.  ``origins[0]``
    is ``eta1``; ``origins[j + 1]`` is the origin of joint ``j`` (on its axis).
    ``axes[j]`` is the world-frame axis of joint ``j``.
    """

    rotations: list
    origins: list
    axes: list
    ee_position: np.ndarray
    ee_rotation: np.ndarray


def chain_frames(model: KinematicModel, q) -> ChainFrames:
    q = np.asarray(q)
    if q.shape != (model.n,):
        raise ValueError(f"expected q of length {model.n}, got {q.shape}")
    R = rpy_to_rotation(q[3:6])
    p = q[:3]
    rotations, origins, axes = [R], [p], []
    for j in range(model.n_joints):
        o = p + R @ model.joint_offsets[j]
        a = model.joint_axes[j]
        z = R @ a
        R = R @ axis_angle(a, q[6 + j])
        p = o
        rotations.append(R)
        origins.append(o)
        axes.append(z)
    x_e = p + R @ model.ee_offset
    R_e = R @ model.ee_rotation
    return ChainFrames(rotations, origins, axes, x_e, R_e)


def axis_angle(axis, angle):
    """Rodrigues rotation about a unit ``axis`` (complex angles allowed)."""
    K = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def forward_kinematics(model: KinematicModel, q) -> EndEffectorState:
    fr = chain_frames(model, q)
    return EndEffectorState(fr.ee_position, fr.ee_rotation)


def point_jacobian(frames: ChainFrames, body: int, point, n: int):
    """6 x n Jacobian of a point rigidly attached to ``body``.

    Rows 0-2 give its inertial linear velocity, rows 3-5 the body's angular
    velocity, both for ``zeta`` in the body-velocity convention.
    """
    Rv = frames.rotations[0]
    dtype = np.result_type(Rv, point)
    Jm = np.zeros((6, n), dtype=dtype)
    Jm[:3, :3] = Rv
    Jm[:3, 3:6] = -skew(point - frames.origins[0]) @ Rv
    Jm[3:, 3:6] = Rv
    for j in range(body):
        z = frames.axes[j]
        Jm[:3, 6 + j] = _cross(z, point - frames.origins[j + 1])
        Jm[3:, 6 + j] = z
    return Jm


def jacobian(model: KinematicModel, q, frames: ChainFrames | None = None):
    """Geometric Jacobian ``J(q)`` with ``xdot = J(q) @ zeta`` (6 x n)."""
    fr = chain_frames(model, q) if frames is None else frames
    return point_jacobian(fr, model.n_joints, fr.ee_position, model.n)


def end_effector_state(model: KinematicModel, q, zeta) -> EndEffectorState:
    fr = chain_frames(model, q)
    J = point_jacobian(fr, model.n_joints, fr.ee_position, model.n)
    return EndEffectorState(fr.ee_position, fr.ee_rotation, J @ np.asarray(zeta, dtype=float))


def reference_model() -> KinematicModel:
    """Default 4-joint arm mounted under the front of the vehicle.

    Joint axes: yaw (z), shoulder pitch (y), elbow pitch (y), wrist roll (x).
    With the arm at ``[0, 0.5, -0.5, 0]`` the tool points along +x with
    ``R_e = R_vehicle``.
    """
    return KinematicModel(
        joint_offsets=np.array([[0.35, 0.0, 0.15],
                                [0.06, 0.0, 0.0],
                                [0.30, 0.0, 0.0],
                                [0.25, 0.0, 0.0]]),
        joint_axes=np.array([[0.0, 0.0, 1.0],
                             [0.0, 1.0, 0.0],
                             [0.0, 1.0, 0.0],
                             [1.0, 0.0, 0.0]]),
        ee_offset=np.array([0.12, 0.0, 0.0]),
    )
