import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from fbcbf.contact import (
    ContactKind,
    ContactLost,
    ContactModel,
    GradientBoundViolation,
    InteractionWrench,
    certify_gradient_bounds,
    contact_wrench,
    deformation,
    deformation_for_force,
    deformation_rate,
    force_gradient,
    force_magnitude,
    generalized_normal,
    gradient_bounds,
    wrench_decompose,
)

QUAD = ContactModel(ContactKind.QUADRATIC, 300.0)
HERTZ = ContactModel(ContactKind.HERTZ, 300.0)


def test_deformation_examples():
    assert deformation([0.03, 0.5, -0.2]) == 0.03
    assert deformation([0.0, 0.4, 1.0]) == 0.0


def test_deformation_rate_matches_finite_difference():
    def x(t):
        return np.array([0.02 + 0.01 * np.sin(3 * t), 0.1 * t, np.cos(t)])

    def xdot(t):
        return np.array([0.03 * np.cos(3 * t), 0.1, -np.sin(t), 0, 0, 0])

    h = 1e-6
    for t in np.linspace(0, 2, 7):
        fd = (deformation(x(t + h)) - deformation(x(t - h))) / (2 * h)
        assert abs(fd - deformation_rate(xdot(t))) < 1e-8


def test_force_magnitude_quadratic_example():
    assert force_magnitude(QUAD, 0.05) == pytest.approx(0.75, abs=1e-12)
    assert 300.0 * 0.05 ** 2 == pytest.approx(force_magnitude(QUAD, 0.05), rel=1e-15)


def test_force_zero_at_zero_deformation():
    assert force_magnitude(QUAD, 0.0) == 0.0
    assert force_magnitude(HERTZ, 0.0) == 0.0


def test_separation_flag():
    assert force_magnitude(QUAD, -1e-3) == 0.0
    with pytest.raises(ContactLost):
        force_magnitude(QUAD, -1e-3, strict=True)


def test_initial_deformation_by_root_finding():
    chi = brentq(lambda c: force_magnitude(QUAD, c) - 0.45, 0.0, 1.0, xtol=1e-15)
    assert chi == pytest.approx(np.sqrt(0.45 / 300.0), rel=1e-12)
    assert chi == pytest.approx(0.03873, abs=1e-5)
    assert deformation_for_force(QUAD, 0.45) == pytest.approx(chi, rel=1e-12)
    chi_h = brentq(lambda c: force_magnitude(HERTZ, c) - 0.45, 0.0, 1.0, xtol=1e-15)
    assert deformation_for_force(HERTZ, 0.45) == pytest.approx(chi_h, rel=1e-10)


def test_gradient_example():
    chi = np.sqrt(0.45 / 300.0)
    h = 1e-7
    fd = (force_magnitude(QUAD, chi + h) - force_magnitude(QUAD, chi - h)) / (2 * h)
    assert force_gradient(QUAD, chi) == pytest.approx(23.24, abs=0.01)
    assert force_gradient(QUAD, chi) == pytest.approx(fd, rel=1e-8)


def test_gradient_below_floor_is_flagged():
    with pytest.raises(GradientBoundViolation):
        force_gradient(HERTZ, 0.0)
    assert force_gradient(HERTZ, 0.0, strict=False) == 0.0


@pytest.mark.parametrize("model", [QUAD, HERTZ])
def test_gradient_finite_difference(model):
    rng = np.random.default_rng(5)
    for chi in rng.uniform(model.chi_star, 0.2, 20):
        h = 1e-7 * max(chi, 1e-3)
        fd = (force_magnitude(model, chi + h) - force_magnitude(model, chi - h)) / (2 * h)
        assert abs(force_gradient(model, chi) - fd) <= 1e-6 * abs(fd)


@given(st.floats(0.0, 1.0), st.floats(1e-9, 1.0), st.sampled_from([QUAD, HERTZ]))
def test_force_monotone(c1, dc, model):
    assert force_magnitude(model, c1 + dc) > force_magnitude(model, c1)


def test_gradient_bounds_cover_operating_range():
    lo, hi = gradient_bounds(QUAD, 0.2, 1.8)
    m = ContactModel(QUAD.kind, QUAD.stiffness, QUAD.chi_star, lo, hi)
    chi_lo, chi_hi = deformation_for_force(QUAD, 0.2), deformation_for_force(QUAD, 1.8)
    chis = np.linspace(chi_lo, chi_hi, 1001)
    grads = [force_gradient(QUAD, c) for c in chis]
    assert min(grads) >= lo - 1e-12 and max(grads) <= hi + 1e-12
    assert 0 < lo <= hi
    wide = ContactModel(QUAD.kind, QUAD.stiffness, QUAD.chi_star, 0.5, hi)
    assert certify_gradient_bounds(wide, chi_hi)
    assert not certify_gradient_bounds(m, chi_hi)  # [chi*, chi_lo) lies below lo


def test_configured_gradient_bounds_cover_swept_stiffness(cfg):
    lo, _, hi = cfg.gradient_range()
    b = cfg.safety_bounds()
    for k in (100.0, 300.0, 900.0):
        g_lo, g_hi = gradient_bounds(ContactModel(ContactKind.QUADRATIC, k), b.f_floor, b.f_ceiling)
        assert lo <= g_lo and g_hi <= hi


def test_model_validation():
    with pytest.raises(ValueError):
        ContactModel(stiffness=0.0)
    with pytest.raises(ValueError):
        ContactModel(chi_star=0.0)
    with pytest.raises(ValueError):
        ContactModel(grad_lower=5.0, grad_upper=1.0)


def test_decompose_pure_normal():
    normal, tang = wrench_decompose(InteractionWrench(np.array([2.0, 0, 0, 0, 0, 0])))
    assert np.array_equal(normal, [2, 0, 0, 0, 0, 0])
    assert np.array_equal(tang, np.zeros(6))


def test_decompose_pure_tangential():
    lam = np.array([0.0, 1, 1, 0.1, 0, 0])
    normal, tang = wrench_decompose(InteractionWrench(lam))
    assert np.array_equal(normal, np.zeros(6))
    assert np.array_equal(tang, lam)


def test_decompose_reassembly_and_projector(rng):
    for _ in range(100):
        n_s = rng.normal(size=3)
        n_s /= np.linalg.norm(n_s)
        w = InteractionWrench(rng.normal(size=6), n_s)
        normal, tang = wrench_decompose(w)
        assert np.allclose(normal + tang, w.lam, atol=1e-12)
        assert w.f == pytest.approx(w.n @ w.lam)
        P = np.outer(w.n, w.n)
        assert np.allclose(P @ P, P, atol=1e-12)


def test_wrench_validation():
    with pytest.raises(ValueError):
        InteractionWrench(np.zeros(5))
    with pytest.raises(ValueError):
        InteractionWrench(np.zeros(6), np.array([1.0, 1.0, 0.0]))
    assert np.array_equal(generalized_normal(), [1, 0, 0, 0, 0, 0])


def test_contact_wrench_tangential_damping_is_sliding_only():
    lam, chi = contact_wrench(QUAD, [0.04, 0.1, 0.2], [0.5, 0.3, -0.2, 1.0, 2.0, 3.0], tangential_damping=2.0)
    assert chi == 0.04
    assert np.allclose(lam, [300 * 0.04 ** 2, 0.6, -0.4, 0, 0, 0], atol=1e-14)
    lam, chi = contact_wrench(QUAD, [-0.01, 0, 0], np.ones(6), 2.0)
    assert chi < 0 and np.array_equal(lam, np.zeros(6))
