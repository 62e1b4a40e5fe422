"""Scenario configuration: dataclasses, TOML loading with strict keys, validation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli

from .contact import ContactModel, deformation_for_force
from .dyn_cbf import DynCbfParams, VelocityBounds, energy_barrier, softmin_barrier, velocity_barrier
from .dynamics import CompiledModel, DynamicsModel, reference_dynamics
from .kin_cbf import KinCbfParams, SafetyBounds, barrier_values
from .kinematics import KinematicModel, forward_kinematics, reference_model
from .task_errors import Sinusoid, TaskReference, compute_errors


class ConfigError(ValueError):
    pass


@dataclass
class ModelSpec:
    joint_offsets: list = field(default_factory=lambda: reference_model().joint_offsets.tolist())
    joint_axes: list = field(default_factory=lambda: reference_model().joint_axes.tolist())
    ee_offset: list = field(default_factory=lambda: [0.12, 0.0, 0.0])
    vehicle_mass: float = 20.0
    vehicle_inertia: list = field(default_factory=lambda: [0.35, 0.55, 0.6])
    cob: list = field(default_factory=lambda: [0.0, 0.0, -0.02])
    link_masses: list = field(default_factory=lambda: [0.4, 0.6, 0.45, 0.3])
    link_radius: float = 0.05
    added_mass: list = field(default_factory=lambda: [6.0, 10.0, 12.0, 0.15, 0.25, 0.25])
    linear_damping: list = field(default_factory=lambda: [8.0, 12.0, 14.0, 1.0, 1.5, 1.5])
    quadratic_damping: list = field(default_factory=lambda: [18.0, 25.0, 28.0, 1.0, 1.5, 1.5])
    joint_damping: list = field(default_factory=lambda: [0.3, 0.3, 0.2, 0.05])
    joint_min: list = field(default_factory=lambda: [-1.5, -0.5, -1.5, -1.5])
    joint_max: list = field(default_factory=lambda: [1.5, 1.5, 0.5, 1.5])


@dataclass
class ContactSpec:
    kind: str = "quadratic"
    stiffness: float = 300.0
    chi_star: float = 1e-3
    tangential_damping: float = 2.0


@dataclass
class SinusoidSpec:
    offset: float = 0.0
    amplitude: float = 0.0
    period: float = 0.0
    phase: float = 0.0


@dataclass
class ReferenceSpec:
    force: SinusoidSpec = field(default_factory=lambda: SinusoidSpec(offset=1.0))
    y: SinusoidSpec = field(default_factory=lambda: SinusoidSpec(0.0, 0.15, 40.0, 0.0))
    z: SinusoidSpec = field(default_factory=lambda: SinusoidSpec(0.0, 0.1, 40.0, 0.0))
    roll: SinusoidSpec = field(default_factory=SinusoidSpec)
    pitch: SinusoidSpec = field(default_factory=SinusoidSpec)
    yaw: SinusoidSpec = field(default_factory=SinusoidSpec)


@dataclass
class BoundsSpec:
    M_lower: list = field(default_factory=lambda: [1.0, 0.1, 0.1, 0.3, 0.2, 0.2])
    M_upper: list = field(default_factory=lambda: [0.5, 0.1, 0.1, 0.3, 0.2, 0.2])
    f_floor: float = 0.2
    f_ceiling: float = 1.8
    # Shrink the force-error limits so the corridor conditions hold with this margin [N].
    tighten_force_limits: bool = True
    corridor_margin: float = 0.01


@dataclass
class KinCbfSpec:
    enabled: bool = True
    gamma: float = 1.0
    kappa: list = field(default_factory=lambda: [5.0] * 6)
    mu: float = 1e-2
    joint_limit_gain: float = 0.2
    # Configured gradient bounds; 0 means "derive from nominal_stiffness over the corridor".
    grad_lower: float = 8.0
    grad_upper: float = 85.0
    grad_nominal: float = 0.0
    nominal_stiffness: float = 300.0


@dataclass
class VelocitySpec:
    rho: list = field(default_factory=lambda: [0.5] * 10)
    d_guard: float = 1e-4


@dataclass
class DynCbfSpec:
    enabled: bool = True
    eta: float = 2000.0
    gamma_energy: float = 100.0
    # Per-DoF disturbance bound |delta_i| <= delta_bar_i [N, N m].
    delta_bar: list = field(default_factory=lambda: [5.0, 5.0, 5.0, 0.2, 0.2, 0.2, 0.02, 0.02, 0.02, 0.001])
    kappa_d: float = 5.0
    kappa_v: float = 5.0
    ref_accel_feedforward: bool = False
    velocity_gain: float = 20.0
    derivative_cutoff_hz: float = 20.0


@dataclass
class DisturbanceSpec:
    amplitude: float = 0.1
    period: float = 50.0
    direction: list = field(default_factory=lambda: [1.0, 1.0, 1.0])


@dataclass
class NoiseSpec:
    fraction: float = 0.05
    truncation: float = 3.0
    scale_position: float = 0.01
    scale_angle: float = 0.01
    scale_joint: float = 0.01
    scale_velocity: float = 0.01
    scale_force: float = 1.0
    scale_moment: float = 0.01


@dataclass
class InitialSpec:
    force: float = 0.45
    e_y: float = 0.04
    e_z: float = -0.03
    vehicle_rpy: list = field(default_factory=lambda: [0.05, -0.04, 0.08])
    arm: list = field(default_factory=lambda: [0.0, 0.5, -0.5, 0.0])


@dataclass
class SimSpec:
    dt: float = 1e-3
    duration: float = 60.0
    seed: int = 0
    log_every: int = 1


@dataclass
class ScenarioConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    contact: ContactSpec = field(default_factory=ContactSpec)
    reference: ReferenceSpec = field(default_factory=ReferenceSpec)
    bounds: BoundsSpec = field(default_factory=BoundsSpec)
    kin_cbf: KinCbfSpec = field(default_factory=KinCbfSpec)
    velocity: VelocitySpec = field(default_factory=VelocitySpec)
    dyn_cbf: DynCbfSpec = field(default_factory=DynCbfSpec)
    disturbance: DisturbanceSpec = field(default_factory=DisturbanceSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    initial: InitialSpec = field(default_factory=InitialSpec)
    sim: SimSpec = field(default_factory=SimSpec)

    # ---- builders -------------------------------------------------------
    def kinematic_model(self) -> KinematicModel:
        m = self.model
        return KinematicModel(joint_offsets=np.array(m.joint_offsets, dtype=float),
                              joint_axes=np.array(m.joint_axes, dtype=float),
                              ee_offset=np.array(m.ee_offset, dtype=float))

    def dynamics_model(self) -> DynamicsModel:
        m = self.model
        return reference_dynamics(self.kinematic_model(), vehicle_mass=m.vehicle_mass,
                                  vehicle_inertia=m.vehicle_inertia, cob=m.cob,
                                  link_masses=m.link_masses, link_radius=m.link_radius,
                                  added_mass=m.added_mass, linear_damping=m.linear_damping,
                                  quadratic_damping=m.quadratic_damping,
                                  joint_damping=m.joint_damping)

    def plant_contact(self) -> ContactModel:
        c = self.contact
        return ContactModel(c.kind, c.stiffness, c.chi_star)

    def gradient_range(self):
        """Controller-side ``(lower, nominal, upper)`` gradient of the force law."""
        k = self.kin_cbf
        lo, hi = k.grad_lower, k.grad_upper
        if lo <= 0 or hi <= 0:
            nominal = ContactModel(self.contact.kind, k.nominal_stiffness, self.contact.chi_star)
            nominal = nominal.with_gradient_bounds(self.bounds.f_floor, self.bounds.f_ceiling)
            lo, hi = nominal.grad_lower, nominal.grad_upper
        mid = k.grad_nominal if k.grad_nominal > 0 else math.sqrt(lo * hi)
        return lo, mid, hi

    def task_reference(self) -> TaskReference:
        r = self.reference
        s = lambda x: Sinusoid(x.offset, x.amplitude, x.period, x.phase)
        return TaskReference(s(r.force), s(r.y), s(r.z), (s(r.roll), s(r.pitch), s(r.yaw)))

    def force_limits(self, samples: int = 2001):
        """Force-error limits ``(M_lower_f, M_upper_f)`` the controller uses.

        With ``tighten_force_limits`` the configured limits are shrunk until
        ``inf(f_d) - M_lower_f`` and ``sup(f_d) + M_upper_f`` sit inside the
        force corridor by ``corridor_margin``.
        """
        b = self.bounds
        lo, hi = float(b.M_lower[0]), float(b.M_upper[0])
        if b.tighten_force_limits:
            ref = self.task_reference()
            fd = np.array([ref.f_d(t) for t in np.linspace(0.0, self.sim.duration, samples)])
            lo = min(lo, fd.min() - b.f_floor - b.corridor_margin)
            hi = min(hi, b.f_ceiling - fd.max() - b.corridor_margin)
        return lo, hi

    def safety_bounds(self) -> SafetyBounds:
        b = self.bounds
        lower = np.array(b.M_lower, float)
        upper = np.array(b.M_upper, float)
        lower[0], upper[0] = self.force_limits()
        return SafetyBounds(lower, upper, b.f_floor, b.f_ceiling)

    def kin_params(self) -> KinCbfParams:
        k = self.kin_cbf
        return KinCbfParams(k.gamma, np.array(k.kappa, float), k.mu, k.joint_limit_gain)

    def velocity_bounds(self) -> VelocityBounds:
        return VelocityBounds(np.array(self.velocity.rho, float), self.velocity.d_guard)

    def dyn_params(self) -> DynCbfParams:
        d = self.dyn_cbf
        return DynCbfParams(d.eta, d.gamma_energy, np.array(d.delta_bar, float), d.kappa_d, d.kappa_v,
                            d.ref_accel_feedforward)

    def initial_state(self, kin: KinematicModel | None = None):
        """``(q0, zeta0)``: vehicle placed so the tool starts at the configured errors."""
        kin = self.kinematic_model() if kin is None else kin
        ini = self.initial
        ref = self.task_reference()
        chi0 = deformation_for_force(self.plant_contact(), ini.force)
        q = np.zeros(kin.n)
        q[3:6] = ini.vehicle_rpy
        q[6:] = ini.arm
        x_e = forward_kinematics(kin, q).position
        p_d = ref.p_d(0.0)
        target = np.array([chi0, p_d[0] + ini.e_y, p_d[1] + ini.e_z])
        q[:3] = target - x_e
        return q, np.zeros(kin.n)

    def content_hash(self) -> str:
        blob = json.dumps(to_dict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "ScenarioConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"contact.stiffness": 900})``."""
        d = to_dict(self)
        for key, value in changes.items():
            set_dotted(d, key, value)
        return from_dict(d)


# ---- (de)serialisation ---------------------------------------------------

def to_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a table, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    default = cls()
    for name, f in known.items():
        where = f"{path}.{name}" if path else name
        if name not in data:
            continue
        value = data[name]
        current = getattr(default, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, where)
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}: expected a boolean")
            kwargs[name] = value
        elif isinstance(current, int):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{where}: expected an integer")
            kwargs[name] = value
        elif isinstance(current, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{where}: expected a number")
            kwargs[name] = float(value)
        elif isinstance(current, str):
            if not isinstance(value, str):
                raise ConfigError(f"{where}: expected a string")
            kwargs[name] = value
        elif isinstance(current, list):
            if not isinstance(value, list):
                raise ConfigError(f"{where}: expected an array")
            kwargs[name] = value
        else:  # pragma: no cover
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> ScenarioConfig:
    return _build(ScenarioConfig, data, "")


def load_config(path) -> ScenarioConfig:
    text = Path(path).read_text()
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def set_dotted(d: dict, key: str, value):
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key}")
    node[parts[-1]] = value


def dumps_toml(cfg: ScenarioConfig) -> str:
    """Minimal TOML writer for the config tree (tables of scalars and arrays)."""
    lines = []

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    def emit(prefix, table):
        scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
        subs = {k: v for k, v in table.items() if isinstance(v, dict)}
        if scalars:
            lines.append(f"[{prefix}]")
            lines.extend(f"{k} = {fmt(v)}" for k, v in scalars.items())
            lines.append("")
        for k, v in subs.items():
            emit(f"{prefix}.{k}" if prefix else k, v)

    emit("", to_dict(cfg))
    return "\n".join(lines)


# ---- validation ----------------------------------------------------------

@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


def validate(cfg: ScenarioConfig, samples: int = 2001) -> list[Check]:
    """Every precondition a run relies on, as named pass/fail checks."""
    checks: list[Check] = []
    add = lambda name, ok, detail="": checks.append(Check(name, bool(ok), detail))

    add("dt > 0", cfg.sim.dt > 0, f"dt={cfg.sim.dt}")
    add("duration > 0", cfg.sim.duration > 0, f"duration={cfg.sim.duration}")
    add("log_every >= 1", cfg.sim.log_every >= 1)
    if not all(c.ok for c in checks):
        return checks
    try:
        ref = cfg.task_reference()
        m_lo, m_hi = cfg.force_limits(samples)
    except (ValueError, TypeError) as exc:
        add("reference well formed", False, str(exc))
        return checks
    fd = np.array([ref.f_d(t) for t in np.linspace(0.0, cfg.sim.duration, samples)])
    b = cfg.bounds
    add("0 < f_floor < f_ceiling", 0 < b.f_floor < b.f_ceiling, f"[{b.f_floor}, {b.f_ceiling}]")
    add("inf{-M_lower_f + f_d} > f_floor", np.min(fd) - m_lo > b.f_floor,
        f"inf={np.min(fd) - m_lo:.6g}, M_lower_f={m_lo:.6g}")
    add("sup{M_upper_f + f_d} < f_ceiling", np.max(fd) + m_hi < b.f_ceiling,
        f"sup={np.max(fd) + m_hi:.6g}, M_upper_f={m_hi:.6g}")
    add("force limits positive", m_lo > 0 and m_hi > 0, f"M_lower_f={m_lo:.6g}, M_upper_f={m_hi:.6g}")
    if not all(c.ok for c in checks):
        return checks
    try:
        dyn = cfg.dynamics_model()
        bounds = cfg.safety_bounds()
        cfg.kin_params()
        vb = cfg.velocity_bounds()
        dp = cfg.dyn_params()
        contact = cfg.plant_contact()
    except (ValueError, TypeError) as exc:
        add("parameters well formed", False, str(exc))
        return checks
    add("parameters well formed", True)
    n = dyn.n
    add("rho has one entry per DoF", vb.rho.shape == (n,), f"len={vb.rho.size}, n={n}")
    add("delta_bar has one entry per DoF", np.shape(dp.delta_bar) == (n,), f"n={n}")
    add("joint limits ordered", len(cfg.model.joint_min) == n - 6 and len(cfg.model.joint_max) == n - 6
        and all(a < b for a, b in zip(cfg.model.joint_min, cfg.model.joint_max)))
    lo, mid, hi = cfg.gradient_range()
    add("0 < grad_lower <= grad_nominal <= grad_upper", 0 < lo <= mid <= hi, f"[{lo:.4g}, {mid:.4g}, {hi:.4g}]")
    add("noise fraction >= 0", cfg.noise.fraction >= 0)

    if not all(c.ok for c in checks):
        return checks
    q0, z0 = cfg.initial_state(dyn.kin)
    add("pitch inside (-pi/2, pi/2)", abs(q0[4]) < np.pi / 2 - 1e-3)
    terms = CompiledModel(dyn).evaluate(q0, z0)
    f0 = contact.stiffness * max(terms.x_e[0], 0.0) ** contact.exponent
    err = compute_errors(f0, terms.x_e, terms.R_e, ref, 0.0).e
    inside = bounds.contains(err)
    for name, ok, e in zip(("f", "y", "z", "o1", "o2", "o3"), inside, err):
        add(f"initial error e_{name} inside bounds", ok, f"e={e:.6g}")
    # A measured force error can sit up to this far from the true one; if it can
    # cross the limit, the energy constraint demands torques the vehicle cannot
    # apply at rest.
    f_noise = cfg.noise.truncation * cfg.noise.fraction * cfg.noise.scale_force
    f_margin = min(err[0] + bounds.M_lower[0], bounds.M_upper[0] - err[0])
    add("initial force margin exceeds force noise bound", f_margin > f_noise,
        f"margin={f_margin:.6g}, noise bound={f_noise:.6g}")
    b = barrier_values(err, bounds)
    bk = softmin_barrier(b, dp.eta)
    add("b_k(0) > 0", bk > 0, f"b_k={bk:.6g}")
    bvel, _ = velocity_barrier(z0, np.zeros(n), vb.rho)
    add("zeta(0) in velocity set", bvel >= 0, f"b={bvel:.6g}")
    bd = energy_barrier(z0, terms.M, bk, dp.gamma_energy)
    add("(q(0), zeta(0)) in energy set", bd >= 0, f"b_d={bd:.6g}")
    chi_lo = deformation_for_force(contact, bounds.f_floor)
    add("chi(f_floor) >= chi_star", chi_lo >= contact.chi_star, f"chi={chi_lo:.6g}")
    return checks


def default_config() -> ScenarioConfig:
    return ScenarioConfig()
