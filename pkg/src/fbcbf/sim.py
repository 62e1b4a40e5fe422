"""Closed-loop simulation: plant integration, measurement noise, controller session, logging."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig
from .contact import SURFACE_NORMAL, ContactModel, deformation, force_gradient, force_magnitude
from .dyn_cbf import (
    BarrierState,
    DynamicTerms,
    InfeasibleTorqueQP,
    bk_jacobian,
    energy_barrier,
    safe_torque_filter,
    softmin_barrier,
    softmin_weights,
    velocity_barrier,
)
from . import _fast
from .dynamics import CompiledModel, DynamicsModel, SeaCurrentDisturbance
from .kin_cbf import (
    CHANNELS,
    DegenerateBarrier,
    InfeasibleFilter,
    barrier_gradients,
    barrier_values,
    joint_limit_task,
    nominal_velocity,
    redundancy_resolution,
    safe_velocity_filter,
)
from .kinematics import (
    RepresentationSingularity,
    euler_rate_matrix,
    full_velocity_transform_inv,
    skew,
)
from .task_errors import L_matrix, compute_errors, error_rate_map

DIVERGENCE_LIMIT = 1e6


class Divergence(RuntimeError):
    pass


# ---- plant ---------------------------------------------------------------

@dataclass
class Plant:
    """True system: dynamics, contact law, sea current and per-DoF disturbance bound.

    :meth:`derivatives` is the plain numpy reference; :meth:`step` runs the
    compiled RK4 kernel, which evaluates the same equations.
    """

    model: DynamicsModel
    contact: ContactModel
    tangential_damping: float = 0.0
    current_amplitude: float = 0.0
    current_period: float = 50.0
    current_direction: np.ndarray = field(default_factory=lambda: np.ones(3))
    delta_bound: np.ndarray | float = np.inf

    def __post_init__(self):
        self.compiled = CompiledModel(self.model)
        n = self.model.n
        self.current_direction = np.asarray(self.current_direction, dtype=float)
        self.delta_bound = np.broadcast_to(np.asarray(self.delta_bound, dtype=float), (n,)).copy()
        self._n = generalized_normal_6()
        self._sea = SeaCurrentDisturbance(self.model, self.current_amplitude, self.current_period,
                                          self.current_direction, self.delta_bound)
        self._extra = (float(self.contact.exponent), float(self.contact.stiffness),
                       float(self.tangential_damping), float(self.current_amplitude),
                       float(self.current_period), self.current_direction, self.delta_bound)

    def current(self, t):
        return self._sea.current(t)

    def wrench(self, x_e, xdot):
        """``(lam, chi)`` with the force law evaluated on the true stiffness."""
        chi = float(x_e[0])
        if chi < 0:
            return np.zeros(6), chi
        c = self.contact
        lam = c.stiffness * chi ** c.exponent * self._n
        if self.tangential_damping:
            lam[1:3] += self.tangential_damping * xdot[1:3]
        return lam, chi

    def disturbance(self, zeta, R_v, t):
        return self._sea.realize(zeta, R_v, t)

    def derivatives(self, q, zeta, tau, t):
        """``(qdot, zetadot, info)`` for the coupled equations of motion."""
        terms = self.compiled.evaluate(q, zeta)
        xdot = terms.J @ zeta
        lam, chi = self.wrench(terms.x_e, xdot)
        delta = self.disturbance(zeta, terms.R_v, t)
        rhs = tau - terms.Cz - terms.Dz - terms.g - terms.J.T @ lam - delta
        zdot = np.linalg.solve(terms.M, rhs)
        qdot = zeta.copy()
        qdot[:3] = terms.R_v @ zeta[:3]
        qdot[3:6] = euler_rate_matrix(q[3:6]) @ zeta[3:6]
        return qdot, zdot, (terms, lam, chi, delta)

    def step_reference(self, q, zeta, tau, t, dt):
        """RK4 step built on :meth:`derivatives` (slow; used to check :meth:`step`)."""
        k1q, k1z, _ = self.derivatives(q, zeta, tau, t)
        k2q, k2z, _ = self.derivatives(q + 0.5 * dt * k1q, zeta + 0.5 * dt * k1z, tau, t + 0.5 * dt)
        k3q, k3z, _ = self.derivatives(q + 0.5 * dt * k2q, zeta + 0.5 * dt * k2z, tau, t + 0.5 * dt)
        k4q, k4z, _ = self.derivatives(q + dt * k3q, zeta + dt * k3z, tau, t + dt)
        return (q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q),
                zeta + dt / 6.0 * (k1z + 2 * k2z + 2 * k3z + k4z))

    def step(self, q, zeta, tau, t, dt):
        """One RK4 step; the contact wrench is recomputed at every stage."""
        q_next, z_next, ok = _fast.rk4_step(np.ascontiguousarray(q, dtype=float),
                                            np.ascontiguousarray(zeta, dtype=float),
                                            np.ascontiguousarray(tau, dtype=float), float(t), float(dt),
                                            *self.compiled._args, *self._extra)
        if not ok:
            raise RepresentationSingularity(f"pitch reached the Euler singularity near t={t:.6f}")
        if not (np.all(np.isfinite(q_next)) and np.all(np.isfinite(z_next))) or \
                max(np.abs(q_next).max(), np.abs(z_next).max()) > DIVERGENCE_LIMIT:
            raise Divergence(f"state diverged at t={t + dt:.6f}")
        return q_next, z_next


def generalized_normal_6():
    return np.concatenate([SURFACE_NORMAL, np.zeros(3)])


# ---- measurement ---------------------------------------------------------

def truncated_normal(rng: np.random.Generator, size, truncation: float = 3.0):
    """Standard normal samples conditioned on ``|x| <= truncation`` (redraw)."""
    x = rng.standard_normal(size)
    bad = np.abs(x) > truncation
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > truncation
    return x


@dataclass
class NoiseModel:
    """Per-signal standard deviations for ``(q, zeta, lam)``."""

    sigma_q: np.ndarray
    sigma_zeta: np.ndarray
    sigma_lam: np.ndarray
    truncation: float = 3.0

    @classmethod
    def from_config(cls, cfg: ScenarioConfig, n: int):
        nz = cfg.noise
        f = nz.fraction
        sq = np.concatenate([np.full(3, nz.scale_position), np.full(3, nz.scale_angle),
                             np.full(n - 6, nz.scale_joint)]) * f
        sz = np.full(n, nz.scale_velocity) * f
        sl = np.concatenate([np.full(3, nz.scale_force), np.full(3, nz.scale_moment)]) * f
        return cls(sq, sz, sl, nz.truncation)

    @property
    def silent(self) -> bool:
        return not (self.sigma_q.any() or self.sigma_zeta.any() or self.sigma_lam.any())


def measure(q, zeta, lam, noise: NoiseModel, rng: np.random.Generator):
    """Additive zero-mean truncated Gaussian noise on ``q``, ``zeta`` and ``lam``."""
    if noise.silent:
        return q.copy(), zeta.copy(), lam.copy()
    n = len(q)
    z = truncated_normal(rng, 2 * n + 6, noise.truncation)
    return (q + noise.sigma_q * z[:n], zeta + noise.sigma_zeta * z[n:2 * n],
            lam + noise.sigma_lam * z[2 * n:])


# ---- controller ----------------------------------------------------------

@dataclass
class ControlOutput:
    tau: np.ndarray
    tau_des: np.ndarray
    zeta_r: np.ndarray
    zeta_r_dot: np.ndarray
    xdot_c: np.ndarray
    xdot_star: np.ndarray
    kin_active: np.ndarray
    torque_active: np.ndarray
    torque_feasible: bool
    kin_feasible: bool
    barriers: BarrierState | None


class ControllerSession:
    """Stateful wrapper around the three control layers.

    Holds the reference-acceleration filter and the last feasible torque; it
    sees only measurements and configured bounds, never the plant's contact
    stiffness or disturbance.
    """

    def __init__(self, cfg: ScenarioConfig, model: DynamicsModel | None = None,
                 use_kernel: bool = True):
        self.cfg = cfg
        self.use_kernel = use_kernel
        self.model = cfg.dynamics_model() if model is None else model
        self.compiled = CompiledModel(self.model)
        self.n = self.model.n
        self.ref = cfg.task_reference()
        self.bounds = cfg.safety_bounds()
        self.kin = cfg.kin_params()
        self.vel = cfg.velocity_bounds()
        self.dyn = cfg.dyn_params()
        self.grad_lo, self.grad_mid, self.grad_hi = cfg.gradient_range()
        self.q_min = np.array(cfg.model.joint_min, dtype=float)
        self.q_max = np.array(cfg.model.joint_max, dtype=float)
        self.dt = cfg.sim.dt
        wc = 2 * np.pi * cfg.dyn_cbf.derivative_cutoff_hz
        self._alpha = self.dt * wc / (1.0 + self.dt * wc)
        self.Kv = cfg.dyn_cbf.velocity_gain
        self.kin_enabled = cfg.kin_cbf.enabled
        self.dyn_enabled = cfg.dyn_cbf.enabled
        dbar = np.broadcast_to(np.asarray(self.dyn.delta_bar, dtype=float), (self.n,)).copy()
        if np.ndim(self.dyn.delta_bar) == 0:
            self.use_kernel = False  # the kernel implements the per-DoF bound only
        self._kernel_args = (
            self.bounds.M_lower, self.bounds.M_upper, self.kin.kappa, float(self.kin.gamma),
            float(self.kin.mu), float(self.kin.joint_limit_gain), self.q_min, self.q_max,
            float(self.grad_lo), float(self.grad_mid), float(self.grad_hi), self.vel.rho,
            float(self.vel.d_guard), float(self.dyn.eta), float(self.dyn.gamma_energy),
            float(self.dyn.kappa_d), float(self.dyn.kappa_v), dbar, bool(self.dyn.ref_accel_feedforward),
            float(self.Kv), float(self._alpha), float(self.dt))
        self.reset()

    def reset(self):
        self._zr_prev = None
        self._zr_dot = np.zeros(self.n)
        self._tau_last = None

    def _reference_rate(self, zeta_r):
        if self._zr_prev is not None:
            raw = (zeta_r - self._zr_prev) / self.dt
            self._zr_dot = self._zr_dot + self._alpha * (raw - self._zr_dot)
        self._zr_prev = zeta_r.copy()
        return self._zr_dot.copy()

    def kinematic_layer(self, t, q, terms, f):
        err = compute_errors(f, terms.x_e, terms.R_e, self.ref, t)
        L = L_matrix(terms.R_e, self.ref.R_d(t))
        A, r = error_rate_map(self.ref, t, self.grad_mid, L)
        xdot_c = nominal_velocity(err, A, r, self.kin.gamma)
        e = err.e
        active = np.zeros(6, dtype=bool)
        feasible = True
        xdot_star = xdot_c
        if self.kin_enabled:
            try:
                res = safe_velocity_filter(xdot_c, e, A, r, self.bounds, self.kin.kappa,
                                           grad_range=(self.grad_lo, self.grad_hi))
                xdot_star, active = res.xdot, res.active
            except (InfeasibleFilter, DegenerateBarrier):
                feasible = False
        x0 = joint_limit_task(q, self.q_min, self.q_max, self.kin.joint_limit_gain)
        zeta_r = redundancy_resolution(xdot_star, terms.J, self.kin.mu, x0)
        return e, A, r, xdot_c, xdot_star, active, feasible, zeta_r

    def barrier_state(self, t, q, zeta, terms, e, A, r, zeta_r):
        b = barrier_values(e, self.bounds)
        eta = self.dyn.eta
        b_k = softmin_barrier(b, eta)
        b_vel, xi = velocity_barrier(zeta, zeta_r, self.vel.rho)
        b_d = energy_barrier(zeta, terms.M, b_k, self.dyn.gamma_energy)
        xdot = terms.J @ zeta
        w = softmin_weights(b, eta)
        H = barrier_gradients(e, self.bounds)
        edot = A @ xdot - r
        # force channel: worst case over the configured gradient interval
        wf = w[0] * H[0]
        edot_f = [g * xdot[0] - r[0] for g in (self.grad_lo, self.grad_hi)]
        rate = float(w[1:] @ (H[1:] * edot[1:]) + min(wf * v for v in edot_f))
        de_dq = A @ terms.J @ full_velocity_transform_inv(q)
        J_bk = bk_jacobian(e, self.bounds, eta, de_dq)
        return BarrierState(b, b_k, b_vel, b_d, J_bk, xi, rate)

    def __call__(self, t, q, zeta, lam) -> ControlOutput:
        if self.use_kernel:
            return self._call_kernel(t, q, zeta, lam)
        return self._call_reference(t, q, zeta, lam)

    def _call_kernel(self, t, q, zeta, lam) -> ControlOutput:
        fd, fdd, pd, pdd, Rd, wd = self.ref.sample(t)
        has_prev = self._zr_prev is not None
        has_tau = self._tau_last is not None
        out = _fast.control_step(
            np.ascontiguousarray(q, dtype=float), np.ascontiguousarray(zeta, dtype=float),
            np.ascontiguousarray(lam, dtype=float), float(fd), float(fdd), pd, pdd, Rd, wd,
            *self.compiled._args, *self._kernel_args,
            self._zr_prev if has_prev else np.zeros(self.n), self._zr_dot, has_prev,
            self.kin_enabled, self.dyn_enabled,
            self._tau_last if has_tau else np.zeros(self.n), has_tau)
        tau, tau_des, zr, zrd, xc, xs, kin_act, tq_act, flags, bar = out
        self._zr_prev = zr
        self._zr_dot = zrd
        tq_ok = bool(flags[0])
        if self.dyn_enabled and tq_ok:
            self._tau_last = tau
        b_vel, xi = bar[7], (zeta - zr) / self.vel.rho
        barriers = BarrierState(bar[:6].copy(), bar[6], b_vel, bar[8], None, xi, bar[9])
        return ControlOutput(tau, tau_des, zr, zrd.copy(), xc, xs, kin_act > 0, tq_act > 0,
                             tq_ok, bool(flags[1]), barriers)

    def _call_reference(self, t, q, zeta, lam) -> ControlOutput:
        terms = self.compiled.evaluate(q, zeta)
        f = float(lam[0])
        e, A, r, xdot_c, xdot_star, kin_active, kin_ok, zeta_r = self.kinematic_layer(t, q, terms, f)
        zr_dot = self._reference_rate(zeta_r)
        Jt_lam = terms.J.T @ lam
        tau_des = (terms.Cz + terms.Dz + terms.g + Jt_lam
                   + terms.M @ (zr_dot - self.Kv * (zeta - zeta_r)))
        barriers = self.barrier_state(t, q, zeta, terms, e, A, r, zeta_r)
        tq_active = np.zeros(2, dtype=bool)
        feasible = True
        tau = tau_des
        if self.dyn_enabled:
            dterms = DynamicTerms(zeta, terms.M, terms.Cz, terms.Dz, terms.g, Jt_lam)
            try:
                res = safe_torque_filter(tau_des, dterms, barriers, self.dyn, self.vel.rho,
                                         self.vel.d_guard, zr_dot)
                tau, tq_active = res.tau, res.active
                self._tau_last = tau
            except InfeasibleTorqueQP:
                feasible = False
                tau = self._tau_last if self._tau_last is not None else tau_des
        return ControlOutput(tau, tau_des, zeta_r, zr_dot, xdot_c, xdot_star, kin_active,
                             tq_active, feasible, kin_ok, barriers)


# ---- scenario ------------------------------------------------------------

def _names(prefix, k):
    return [f"{prefix}{i}" for i in range(k)]


def log_columns(n: int):
    """Fixed column order of the per-step trajectory log."""
    return (["t"] + _names("q", n) + _names("zeta", n) + _names("zeta_r", n)
            + ["x_e", "y_e", "z_e", "f"]
            + [f"e_{c}" for c in CHANNELS] + [f"b_{c}" for c in CHANNELS]
            + ["b_k", "b_vel", "b_d"] + _names("tau", n)
            + [f"kin_active_{c}" for c in CHANNELS]
            + ["torque_active_energy", "torque_active_velocity", "torque_feasible",
               "kin_feasible", "contact_lost", "delta_norm"])


EVENT_COLUMNS = ("t", "step", "event", "detail")


@dataclass
class SimLog:
    columns: list
    data: np.ndarray
    events: list
    aborted: bool = False
    abort_reason: str = ""

    def __len__(self):
        return self.data.shape[0]

    def col(self, name):
        return self.data[:, self.columns.index(name)]

    def block(self, prefix, names):
        return self.data[:, [self.columns.index(prefix + c) for c in names]]

    @property
    def t(self):
        return self.col("t")

    @property
    def errors(self):
        return self.block("e_", CHANNELS)

    @property
    def barriers(self):
        return self.block("b_", CHANNELS)

    def count(self, event):
        return sum(1 for ev in self.events if ev[2] == event)


def make_plant(cfg: ScenarioConfig, model: DynamicsModel | None = None) -> Plant:
    model = cfg.dynamics_model() if model is None else model
    d = cfg.disturbance
    return Plant(model, cfg.plant_contact(), cfg.contact.tangential_damping,
                 d.amplitude, d.period, np.array(d.direction, float),
                 np.array(cfg.dyn_cbf.delta_bar, float))


CHUNK_STEPS = 2000


def draw_noise(noise: NoiseModel, rng: np.random.Generator, m: int, n: int) -> np.ndarray:
    """Scaled measurement noise for ``m`` steps, one row ``[dq, dzeta, dlam]`` per step."""
    sigma = np.concatenate([noise.sigma_q, noise.sigma_zeta, noise.sigma_lam])
    if noise.silent:
        return np.zeros((m, 2 * n + 6))
    return truncated_normal(rng, (m, 2 * n + 6), noise.truncation) * sigma


def _log_row(t, q, zeta, out, terms, lam, chi, delta, ctrl):
    f_true = float(lam[0])
    err = compute_errors(f_true, terms.x_e, terms.R_e, ctrl.ref, t).e
    b = barrier_values(err, ctrl.bounds)
    b_k = softmin_barrier(b, ctrl.dyn.eta)
    b_vel, _ = velocity_barrier(zeta, out.zeta_r, ctrl.vel.rho)
    b_d = energy_barrier(zeta, terms.M, b_k, ctrl.dyn.gamma_energy)
    return np.concatenate([
        [t], q, zeta, out.zeta_r, terms.x_e, [f_true], err, b, [b_k, b_vel, b_d], out.tau,
        np.asarray(out.kin_active, dtype=float),
        [float(out.torque_active[0]), float(out.torque_active[1]), float(out.torque_feasible),
         float(out.kin_feasible), float(chi < 0), float(np.linalg.norm(delta))]])


def _reference_steps(ctrl, plant, q, zeta, k0, m, total, dt, noise, data):
    """Plain numpy version of :func:`fbcbf._fast.closed_loop`.

    Returns ``(q, zeta, rows, abort)`` where ``abort`` is ``None`` or
    ``(step, reason)``.
    """
    n = len(q)
    for i in range(m):
        k = k0 + i
        t = k * dt
        try:
            terms = plant.compiled.evaluate(q, zeta)
            lam, chi = plant.wrench(terms.x_e, terms.J @ zeta)
            delta = plant.disturbance(zeta, terms.R_v, t)
            out = ctrl(t, q + noise[i, :n], zeta + noise[i, n:2 * n], lam + noise[i, 2 * n:])
        except (RepresentationSingularity, np.linalg.LinAlgError, ValueError) as exc:
            return q, zeta, i, (k, f"{type(exc).__name__}: {exc}")
        data[i] = _log_row(t, q, zeta, out, terms, lam, chi, delta, ctrl)
        if k == total:
            return q, zeta, i + 1, None
        try:
            q, zeta = plant.step(q, zeta, out.tau, t, dt)
        except (Divergence, RepresentationSingularity, np.linalg.LinAlgError) as exc:
            return q, zeta, i + 1, (k, f"{type(exc).__name__}: {exc}")
    return q, zeta, m, None


def _kernel_steps(ctrl, plant, q, zeta, k0, m, total, dt, fd, fdd, pd, pdd, Rd, wd, noise, data):
    """Compiled chunk; returns ``(q, zeta, rows, ok)`` and leaves the session updated."""
    n = len(q)
    zr_prev = ctrl._zr_prev.copy() if ctrl._zr_prev is not None else np.zeros(n)
    zr_dot = np.array(ctrl._zr_dot, dtype=float)
    tau_last = ctrl._tau_last.copy() if ctrl._tau_last is not None else np.zeros(n)
    state = np.array([ctrl._zr_prev is not None, ctrl._tau_last is not None], dtype=np.int64)
    try:
        qn, zn, rows, status = _fast.closed_loop(
            q, zeta, k0, m, total, dt, noise, fd, fdd, pd, pdd, Rd, wd,
            *plant.compiled._args, *ctrl._kernel_args[:-1], *plant._extra,
            zr_prev, zr_dot, tau_last, state, ctrl.kin_enabled, ctrl.dyn_enabled, data,
            DIVERGENCE_LIMIT)
    except (np.linalg.LinAlgError, ValueError, ZeroDivisionError):
        return q, zeta, 0, False
    if status != 0:
        return q, zeta, rows, False
    ctrl._zr_prev = zr_prev
    ctrl._zr_dot = zr_dot
    if state[1]:
        ctrl._tau_last = tau_last
    return qn, zn, rows, True


def _state_snapshot(ctrl):
    return (None if ctrl._zr_prev is None else ctrl._zr_prev.copy(), np.array(ctrl._zr_dot, dtype=float),
            None if ctrl._tau_last is None else ctrl._tau_last.copy())


def _restore(ctrl, snap):
    ctrl._zr_prev, ctrl._zr_dot, ctrl._tau_last = snap[0], snap[1].copy(), snap[2]


def detect_events(data: np.ndarray, cols: list, bounds, every_step: np.ndarray | None = None) -> list:
    """Event rows ``(t, step, event, detail)`` derived from a full-rate log."""
    if len(data) == 0:
        return []
    idx = {c: i for i, c in enumerate(cols)}
    steps = np.arange(len(data)) if every_step is None else every_step
    t = data[:, idx["t"]]
    e = data[:, [idx[f"e_{c}"] for c in CHANNELS]]
    f = data[:, idx["f"]]
    chi = data[:, idx["x_e"]]

    def onsets(mask):
        prev = np.zeros_like(mask)
        prev[1:] = mask[:-1]
        return mask & ~prev

    found = []
    lost = data[:, idx["contact_lost"]] > 0
    if lost.any():
        k = int(np.argmax(lost))
        found.append((k, 0, 0, "contact_lost", f"chi={chi[k]:.17g}"))
    out = onsets(~bounds.contains(e))
    for k, i in zip(*np.nonzero(out)):
        found.append((k, 1, i, "safety_violation", f"e_{CHANNELS[i]}={e[k, i]:.17g}"))
    corr = onsets(~((bounds.f_floor < f) & (f < bounds.f_ceiling)))
    for k in np.flatnonzero(corr):
        found.append((k, 2, 0, "force_corridor_violation", f"f={f[k]:.17g}"))
    for k in np.flatnonzero(data[:, idx["torque_feasible"]] == 0):
        found.append((k, 3, 0, "torque_qp_infeasible", "held last feasible torque"))
    for k in np.flatnonzero(data[:, idx["kin_feasible"]] == 0):
        found.append((k, 4, 0, "kinematic_filter_infeasible", "used nominal velocity"))
    names = [f"kin_active_{c}" for c in CHANNELS] + ["torque_active_energy", "torque_active_velocity"]
    act = onsets(data[:, [idx[c] for c in names]] > 0)
    labels = [f"kin_{c}" for c in CHANNELS] + ["torque_energy", "torque_velocity"]
    for k, i in zip(*np.nonzero(act)):
        found.append((k, 5, i, "filter_activation", labels[i]))
    found.sort(key=lambda r: (r[0], r[1], r[2]))
    return [(float(t[k]), int(steps[k]), name, detail) for k, _, _, name, detail in found]


def run_scenario(cfg: ScenarioConfig, seed: int | None = None, duration: float | None = None,
                 compiled: bool = True) -> SimLog:
    """Run the closed loop: measure, control, integrate; log one row per step.

    ``compiled=False`` runs the plain numpy reference loop.  Both paths
    consume the same noise draws and give the same trajectory.
    """
    seed = cfg.sim.seed if seed is None else seed
    duration = cfg.sim.duration if duration is None else duration
    model = cfg.dynamics_model()
    plant = make_plant(cfg, model)
    ctrl = ControllerSession(cfg, model, use_kernel=compiled)
    noise = NoiseModel.from_config(cfg, model.n)
    rng = np.random.default_rng(seed)
    n = model.n
    dt = cfg.sim.dt
    total = int(round(duration / dt))
    cols = log_columns(n)
    data = np.empty((total + 1, len(cols)))
    q, zeta = cfg.initial_state(model.kin)
    abort = None
    k0 = 0
    while k0 <= total and abort is None:
        m = min(CHUNK_STEPS, total + 1 - k0)
        block = draw_noise(noise, rng, m, n)
        view = data[k0:k0 + m]
        done = False
        if ctrl.use_kernel:
            ts = (k0 + np.arange(m)) * dt
            ref = [ctrl.ref.sample(t) for t in ts]
            arr = [np.array([r[j] for r in ref], dtype=float) for j in range(6)]
            snap = _state_snapshot(ctrl)
            q1, z1, rows, done = _kernel_steps(ctrl, plant, q, zeta, k0, m, total, dt, *arr, block, view)
            if done:
                q, zeta = q1, z1
            else:
                _restore(ctrl, snap)
        if not done:
            q, zeta, rows, abort = _reference_steps(ctrl, plant, q, zeta, k0, m, total, dt, block, view)
        k0 += rows
    data = data[:k0]
    events = detect_events(data, cols, ctrl.bounds)
    reason = ""
    if abort is not None:
        k, reason = abort
        events.append((k * dt, k, "abort", reason))
    keep = np.arange(0, len(data), cfg.sim.log_every)
    return SimLog(cols, data[keep], events, abort is not None, reason)


def summarize(log: SimLog, cfg: ScenarioConfig) -> dict:
    """Key figures of a run and the pass/fail verdict used for the exit code."""
    bounds = cfg.safety_bounds()
    e = log.errors
    f = log.col("f")
    viol_steps = int(np.sum(np.any(~bounds.contains(e), axis=1) | (f <= bounds.f_floor)
                            | (f >= bounds.f_ceiling))) if len(log) else 0
    lost = int(np.sum(log.col("contact_lost"))) if len(log) else 0
    out = {
        "steps": len(log),
        "duration": float(log.t[-1]) if len(log) else 0.0,
        "aborted": log.aborted,
        "abort_reason": log.abort_reason,
        "min_f": float(f.min()) if len(log) else float("nan"),
        "max_f": float(f.max()) if len(log) else float("nan"),
        "safety_violation_steps": viol_steps,
        "contact_lost_steps": lost,
        "torque_infeasible_steps": int(np.sum(log.col("torque_feasible") == 0)) if len(log) else 0,
        "kin_filter_active_steps": int(np.sum(np.any(log.block("kin_active_", CHANNELS) > 0, axis=1)))
        if len(log) else 0,
        "torque_filter_active_steps": int(np.sum((log.col("torque_active_energy") > 0)
                                                 | (log.col("torque_active_velocity") > 0)))
        if len(log) else 0,
        "filter_activations": log.count("filter_activation"),
        "min_b_k": float(log.col("b_k").min()) if len(log) else float("nan"),
        "min_b_vel": float(log.col("b_vel").min()) if len(log) else float("nan"),
        "min_b_d": float(log.col("b_d").min()) if len(log) else float("nan"),
    }
    for i, c in enumerate(CHANNELS):
        out[f"max_abs_e_{c}"] = float(np.abs(e[:, i]).max()) if len(log) else float("nan")
    out["safe"] = bool(not log.aborted and viol_steps == 0 and lost == 0)
    return out


# ---- velocity-resolved task loop -----------------------------------------

@dataclass
class KinematicRun:
    t: np.ndarray
    e: np.ndarray
    b: np.ndarray
    xdot: np.ndarray
    active: np.ndarray


def _project_so3(R):
    U, _, Vt = np.linalg.svd(R)
    return U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt


def run_velocity_resolved(ref, contact, bounds, params, x0, R0, duration: float, dt: float = 1e-3,
                          filtered: bool = True, grad_range=None, perturb=None) -> KinematicRun:
    """Task loop with the end effector following the commanded velocity exactly.

    The state is the end-effector pose; the force comes from ``contact``
    and the controller uses the exact contact gradient unless
    ``grad_range`` is given.  ``perturb(t)`` is added to the nominal command
    before filtering, standing in for a poor nominal controller.  Integrated
    with RK4 on ``(x_e, R_e)``.
    """

    def command(t, x, R):
        chi = deformation(x)
        f = force_magnitude(contact, chi)
        grad = force_gradient(contact, chi)
        err = compute_errors(f, x, R, ref, t)
        A, r = error_rate_map(ref, t, grad, L_matrix(R, ref.R_d(t)))
        u = nominal_velocity(err, A, r, params.gamma)
        if perturb is not None:
            u = u + perturb(t)
        active = np.zeros(6, dtype=bool)
        if filtered:
            res = safe_velocity_filter(u, err.e, A, r, bounds, params.kappa, grad_range)
            u, active = res.xdot, res.active
        return u, err.e, active

    def deriv(t, x, R):
        u, _, _ = command(t, x, R)
        return u[:3], skew(u[3:]) @ R

    steps = int(round(duration / dt))
    x, R = np.array(x0, dtype=float), np.array(R0, dtype=float)
    ts, es, bs, us, acts = [], [], [], [], []
    for k in range(steps + 1):
        t = k * dt
        u, e, active = command(t, x, R)
        ts.append(t)
        es.append(e)
        bs.append(barrier_values(e, bounds))
        us.append(u)
        acts.append(active)
        if k == steps:
            break
        h = 0.5 * dt
        k1x, k1R = deriv(t, x, R)
        k2x, k2R = deriv(t + h, x + h * k1x, R + h * k1R)
        k3x, k3R = deriv(t + h, x + h * k2x, R + h * k2R)
        k4x, k4R = deriv(t + dt, x + dt * k3x, R + dt * k3R)
        x = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        R = _project_so3(R + dt / 6.0 * (k1R + 2 * k2R + 2 * k3R + k4R))
    return KinematicRun(np.array(ts), np.array(es), np.array(bs), np.array(us), np.array(acts))
