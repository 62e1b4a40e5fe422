"""Compliant planar contact: deformation, force laws and wrench decomposition."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

SURFACE_NORMAL = np.array([1.0, 0.0, 0.0])


class ContactLost(ValueError):
    """Raised (or recorded) when the deformation becomes negative."""


class GradientBoundViolation(ValueError):
    """Deformation below the floor where the gradient bound is guaranteed."""


class ContactKind(str, enum.Enum):
    HERTZ = "hertz"
    QUADRATIC = "quadratic"


@dataclass(frozen=True)
class ContactModel:
    kind: ContactKind = ContactKind.QUADRATIC
    stiffness: float = 300.0
    chi_star: float = 1e-3
    grad_lower: float | None = None
    grad_upper: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ContactKind(self.kind))
        if self.stiffness <= 0:
            raise ValueError("stiffness must be positive")
        if self.chi_star <= 0:
            raise ValueError("chi_star must be positive")
        lo, hi = self.grad_lower, self.grad_upper
        if lo is not None and hi is not None and not 0 < lo <= hi:
            raise ValueError("gradient bounds need 0 < lower <= upper")

    @property
    def exponent(self) -> float:
        return 1.5 if self.kind is ContactKind.HERTZ else 2.0

    def with_gradient_bounds(self, f_floor: float, f_ceiling: float) -> "ContactModel":
        """Copy with gradient bounds taken over the force corridor."""
        lo, hi = gradient_bounds(self, f_floor, f_ceiling)
        return ContactModel(self.kind, self.stiffness, self.chi_star, lo, hi)


def deformation(x_e, n_s=SURFACE_NORMAL) -> float:
    """Penetration depth ``n_s . x_e`` of the tool into the surface."""
    return float(np.dot(n_s, x_e))


def deformation_rate(xdot_e, n_s=SURFACE_NORMAL) -> float:
    return float(np.dot(n_s, xdot_e[:3]))


def force_magnitude(model: ContactModel, chi: float, strict: bool = False) -> float:
    """Normal force ``Phi(chi)``; zero (or :class:`ContactLost`) when separated."""
    if chi < 0:
        if strict:
            raise ContactLost(f"deformation {chi:.3e} < 0")
        return 0.0
    return model.stiffness * chi ** model.exponent


def force_gradient(model: ContactModel, chi: float, strict: bool = True) -> float:
    """``dPhi/dchi``; raises below ``chi_star`` unless ``strict`` is False."""
    if strict and chi < model.chi_star:
        raise GradientBoundViolation(f"deformation {chi:.3e} below chi* = {model.chi_star:.3e}")
    if chi <= 0:
        return 0.0
    p = model.exponent
    return p * model.stiffness * chi ** (p - 1.0)


def deformation_for_force(model: ContactModel, f: float) -> float:
    """Deformation producing force ``f``."""
    if f < 0:
        raise ValueError("force must be non-negative")
    return (f / model.stiffness) ** (1.0 / model.exponent)


def gradient_bounds(model: ContactModel, f_floor: float, f_ceiling: float):
    """Gradient range over deformations producing forces in ``[f_floor, f_ceiling]``.

    ``Phi`` is convex for both laws, so the extremes sit at the ends.
    """
    chi_lo = max(deformation_for_force(model, f_floor), model.chi_star)
    chi_hi = deformation_for_force(model, f_ceiling)
    return force_gradient(model, chi_lo), force_gradient(model, chi_hi)


def certify_gradient_bounds(model: ContactModel, chi_max: float, samples: int = 2001) -> bool:
    """Sampled check that the configured bounds enclose ``dPhi`` on ``[chi*, chi_max]``."""
    chis = np.linspace(model.chi_star, chi_max, samples)
    grads = np.array([force_gradient(model, c) for c in chis])
    return bool(grads.min() >= model.grad_lower and grads.max() <= model.grad_upper)


def generalized_normal(n_s=SURFACE_NORMAL):
    return np.concatenate([np.asarray(n_s, dtype=float), np.zeros(3)])


@dataclass
class InteractionWrench:
    lam: np.ndarray
    n_s: np.ndarray = field(default_factory=lambda: SURFACE_NORMAL.copy())

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        self.n_s = np.asarray(self.n_s, dtype=float)
        if self.lam.shape != (6,):
            raise ValueError("wrench must have 6 components")
        if abs(np.linalg.norm(self.n_s) - 1.0) > 1e-12:
            raise ValueError("surface normal must be a unit vector")

    @property
    def n(self):
        return generalized_normal(self.n_s)

    @property
    def f(self) -> float:
        return float(self.n @ self.lam)


def wrench_decompose(w: InteractionWrench):
    """Split ``lam`` into its normal (``n n^T lam``) and tangential parts."""
    n = w.n
    P = np.outer(n, n)
    normal = P @ w.lam
    return normal, w.lam - normal


def contact_wrench(model: ContactModel, x_e, xdot, tangential_damping: float = 0.0,
                   n_s=SURFACE_NORMAL):
    """Wrench the tool exerts on the surface, plus the deformation.

    Normal part from the force law; tangential part is viscous on the sliding
    velocity, ``c_t (I - n_s n_s^T) v_e``.  Returns ``(lam, chi)``; ``lam`` is
    zero when separated.
    """
    chi = deformation(x_e, n_s)
    if chi < 0:
        return np.zeros(6), chi
    n = generalized_normal(n_s)
    lam = force_magnitude(model, chi) * n
    if tangential_damping:
        v = np.asarray(xdot, dtype=float)[:3]
        n_s = np.asarray(n_s, dtype=float)
        lam[:3] += tangential_damping * (v - n_s * (n_s @ v))
    return lam, chi

