import numpy as np
import pytest

from fbcbf.contact import ContactKind, ContactModel
from fbcbf.kin_cbf import (
    DegenerateBarrier,
    InfeasibleFilter,
    KinCbfParams,
    SafetyBounds,
    barrier_gradients,
    barrier_values,
    damped_pseudo_inverse,
    joint_limit_task,
    nominal_velocity,
    project_small,
    redundancy_resolution,
    safe_velocity_filter,
)
from fbcbf.sim import run_velocity_resolved
from fbcbf.task_errors import L_matrix, Sinusoid, TaskReference, compute_errors, error_rate_map

from conftest import random_rotation
from oracles import DEFAULT_BOUNDS, kinematic_rows, ldp_projection, random_kinematic_instance

GRAD = (8.0, 85.0)


def test_barrier_values_and_gradients(rng):
    b = DEFAULT_BOUNDS
    assert barrier_values(np.zeros(6), b) == pytest.approx(b.M_lower * b.M_upper)
    assert np.allclose(barrier_values(-b.M_lower, b), 0.0) and np.allclose(barrier_values(b.M_upper, b), 0.0)
    e = rng.uniform(-0.05, 0.05, 6)
    h = 1e-7
    fd = (barrier_values(e + h, b) - barrier_values(e - h, b)) / (2 * h)
    assert np.allclose(barrier_gradients(e, b), fd, atol=1e-8)


def test_force_barrier_example():
    # e_f = -0.55 inside (-1.0, 0.5): (e + 1)(0.5 - e) = 0.45 * 1.05
    b = SafetyBounds(np.array([1.0, 0.1, 0.1, 0.3, 0.2, 0.2]), np.array([0.5, 0.1, 0.1, 0.3, 0.2, 0.2]), 0.2, 1.8)
    assert barrier_values(np.array([-0.55, 0, 0, 0, 0, 0]), b)[0] == pytest.approx(0.4725, abs=1e-12)


def test_nominal_velocity_example():
    # f = 0.45 on k = 300 gives grad 2 sqrt(300 * 0.45) = 23.24; f_d = 1 constant
    ref = TaskReference(force=1.0)
    grad = 2 * np.sqrt(300 * 0.45)
    err = compute_errors(0.45, np.zeros(3), np.eye(3), ref, 0.0)
    A, r = error_rate_map(ref, 0.0, grad, L_matrix(np.eye(3), np.eye(3)))
    xc = nominal_velocity(err, A, r, gamma=1.0)
    assert xc[0] == pytest.approx(0.55 / 23.2379, rel=1e-4)
    assert np.allclose(xc[1:], 0.0)


def test_nominal_velocity_gives_exponential_rate(rng):
    for _ in range(50):
        xc, e, A, r, _ = random_kinematic_instance(rng)
        from fbcbf.task_errors import TaskError
        err = TaskError(e[0], e[1:3], e[3:])
        gamma = rng.uniform(0.1, 5)
        x = nominal_velocity(err, A, r, gamma)
        assert np.allclose(A @ x - r, -gamma * e, atol=1e-12)


def test_filter_passes_safe_command_through():
    e = np.zeros(6)
    A = np.eye(6)
    A[0, 0] = 26.0
    A[3:, 3:] = -np.eye(3)
    res = safe_velocity_filter(np.zeros(6), e, A, np.zeros(6), DEFAULT_BOUNDS, np.full(6, 5.0), GRAD)
    assert np.array_equal(res.xdot, np.zeros(6)) and not res.active.any()


def test_filter_matches_qp_oracle(rng):
    hits = 0
    for _ in range(1000):
        xc, e, A, r, kappa = random_kinematic_instance(rng)
        res = safe_velocity_filter(xc, e, A, r, DEFAULT_BOUNDS, kappa, GRAD)
        G, c = kinematic_rows(e, A, r, DEFAULT_BOUNDS, kappa, GRAD)
        ref = ldp_projection(xc, G, c)
        assert ref is not None
        scale = max(1.0, np.abs(ref).max())
        assert np.abs(res.xdot - ref).max() <= 1e-8 * scale
        assert np.all(G @ res.xdot - c >= -1e-9 * max(1.0, np.abs(c).max()))
        hits += res.active.any()
    assert hits > 300  # the instances exercise the filter, not just pass-through


def test_filter_without_gradient_range_uses_nominal_gain(rng):
    for _ in range(200):
        xc, e, A, r, kappa = random_kinematic_instance(rng)
        res = safe_velocity_filter(xc, e, A, r, DEFAULT_BOUNDS, kappa)
        g = A[0, 0]
        G, c = kinematic_rows(e, A, r, DEFAULT_BOUNDS, kappa, (g,))
        ref = ldp_projection(xc, G, c)
        assert np.abs(res.xdot - ref).max() <= 1e-8 * max(1.0, np.abs(ref).max())


def test_single_violation_coupled_form_is_exact(rng):
    checked = 0
    while checked < 100:
        xc, e, A, r, kappa = random_kinematic_instance(rng)
        exact = safe_velocity_filter(xc, e, A, r, DEFAULT_BOUNDS, kappa)
        if exact.psi[exact.psi < 0].size != 1:
            continue
        coupled = safe_velocity_filter(xc, e, A, r, DEFAULT_BOUNDS, kappa, coupled=True)
        i = int(np.argmin(exact.psi))
        if i >= 3:
            # one violated attitude row: the exact QP moves along H_i L^T[i] in w, the aggregated
            # form along the filter coordinate u_i; they agree only if L^T[i] is a coordinate row
            continue
        assert np.allclose(coupled.xdot, exact.xdot, atol=1e-10)
        checked += 1


def test_coupled_form_satisfies_the_aggregate_constraint(rng):
    for _ in range(200):
        xc, e, A, r, kappa = random_kinematic_instance(rng)
        res = safe_velocity_filter(xc, e, A, r, DEFAULT_BOUNDS, kappa, coupled=True)
        if not res.active.any():
            continue
        # the aggregated correction restores the summed margin of the violated channels
        res2 = safe_velocity_filter(res.xdot, e, A, r, DEFAULT_BOUNDS, kappa)
        assert res2.psi[res.active].sum() == pytest.approx(0.0, abs=1e-9)


def test_degenerate_barrier_flagged():
    b = SafetyBounds(np.full(6, 0.2), np.full(6, 0.2), 0.1, 2.0)
    with pytest.raises(DegenerateBarrier):
        safe_velocity_filter(np.ones(6), np.zeros(6), np.eye(6), np.zeros(6), b, np.ones(6))


def test_project_small_examples_and_infeasibility():
    x, act = project_small(np.zeros(2), np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 2.0]))
    assert np.allclose(x, [1, 2]) and act.all()
    x, act = project_small(np.array([3.0, 0.0]), np.array([[1.0, 0.0]]), np.array([1.0]))
    assert np.array_equal(x, [3.0, 0.0]) and not act.any()
    with pytest.raises(InfeasibleFilter):
        project_small(np.zeros(1), np.array([[1.0], [-1.0]]), np.array([1.0, 0.0]))


def test_damped_pseudo_inverse_limits(rng, kin):
    from fbcbf.kinematics import jacobian
    from conftest import random_q
    for _ in range(20):
        J = jacobian(kin, random_q(rng))
        xs = rng.normal(size=6)
        zr = redundancy_resolution(xs, J, 0.0)
        assert np.allclose(J @ zr, xs, atol=1e-9)
        assert np.allclose(damped_pseudo_inverse(J, 0.0), np.linalg.pinv(J), atol=1e-9)


def test_redundancy_null_space_leaves_task_unchanged(rng, kin):
    from fbcbf.kinematics import jacobian
    from conftest import random_q
    for _ in range(20):
        J = jacobian(kin, random_q(rng))
        xs = rng.normal(size=6)
        z0 = rng.normal(size=10)
        a = redundancy_resolution(xs, J, 0.0, z0)
        assert np.allclose(J @ a, xs, atol=1e-9)


def test_damped_solution_norm_bound(rng, kin):
    from fbcbf.kinematics import jacobian
    from conftest import random_q
    mu = 1e-2
    for _ in range(50):
        J = jacobian(kin, random_q(rng))
        # drive J towards rank deficiency
        U, s, Vt = np.linalg.svd(J)
        s[-1] *= rng.uniform(0, 1e-3)
        J = U @ np.diag(s) @ Vt[:6]
        xs = rng.normal(size=6)
        zr = redundancy_resolution(xs, J, mu)
        assert np.linalg.norm(zr) <= np.linalg.norm(xs) / (2 * mu) + 1e-9


def test_joint_limit_task():
    q_min, q_max = np.array([-1.0, -1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0, 1.0])
    q = np.zeros(10)
    assert np.array_equal(joint_limit_task(q, q_min, q_max, 0.2), np.zeros(10))
    q[6:] = [0.5, -0.5, 0.9, 0.0]
    out = joint_limit_task(q, q_min, q_max, 0.2)
    assert np.array_equal(out[:6], np.zeros(6))
    assert np.allclose(out[6:], [-0.1, 0.1, -0.18, 0.0])


def test_params_validation():
    with pytest.raises(ValueError):
        KinCbfParams(gamma=0.0)
    with pytest.raises(ValueError):
        SafetyBounds(np.ones(6), -np.ones(6), 0.2, 1.8)
    with pytest.raises(ValueError):
        SafetyBounds(np.ones(6), np.ones(6), 0.0, 1.8)


def test_corridor_checks():
    lo = np.array([1.0, 0.1, 0.1, 0.3, 0.2, 0.2])
    b = SafetyBounds(lo, np.array([0.5, 0.1, 0.1, 0.3, 0.2, 0.2]), 0.2, 1.8)
    assert b.corridor_checks(1.0, 1.0) == (False, True)
    assert SafetyBounds(np.r_[0.79, lo[1:]], b.M_upper, 0.2, 1.8).corridor_checks(1.0, 1.0) == (True, True)


def _random_reference(rng):
    return TaskReference(force=Sinusoid(1.0, rng.uniform(0, 0.2), rng.uniform(0.5, 3), rng.uniform(0, 6)),
                         y=Sinusoid(0.0, rng.uniform(0, 0.3), rng.uniform(0.5, 3)),
                         z=Sinusoid(0.0, rng.uniform(0, 0.3), rng.uniform(0.5, 3)),
                         attitude=(Sinusoid(0.0, rng.uniform(0, 0.6), rng.uniform(0.5, 3)), 0.0,
                                   Sinusoid(0.0, rng.uniform(0, 0.6), rng.uniform(0.5, 3))))


def test_forward_invariance_velocity_resolved(rng):
    """A biased nominal command leaves the corridor; filtered, it stays inside."""
    contact = ContactModel(ContactKind.QUADRATIC, 300.0)
    params = KinCbfParams(gamma=1.0, kappa=np.full(6, 5.0))
    escaped = 0
    for i in range(50):
        ref = _random_reference(rng)
        x0 = np.array([np.sqrt(rng.uniform(0.45, 1.2) / 300.0), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)])
        R0 = random_rotation(rng, 0.1)
        bias = rng.normal(size=6) * np.r_[0.01, 0.3, 0.3, 1.0, 1.0, 1.0]
        kw = dict(duration=1.5, dt=2e-2, perturb=lambda t, w=bias: w)
        run = run_velocity_resolved(ref, contact, DEFAULT_BOUNDS, params, x0, R0, grad_range=GRAD, **kw)
        assert run.b.min() >= -1e-6
        if i < 10:
            free = run_velocity_resolved(ref, contact, DEFAULT_BOUNDS, params, x0, R0, filtered=False, **kw)
            escaped += free.b.min() < 0
    assert escaped >= 5
