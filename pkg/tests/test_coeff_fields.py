import numpy as np
import pytest
import scipy.integrate as spi
from hypothesis import given, strategies as st

from parametrix_spde import coeff_fields as cf
from parametrix_spde.errors import DomainError

values = st.lists(st.floats(0.5, 2.0), min_size=1, max_size=12)


@given(values, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_piecewise_primitive_matches_quad(vals, a, b):
    n = len(vals)
    prof = cf.PiecewiseProfile.from_arrays(np.linspace(0, 1, n + 1), vals)
    s, t = min(a, b), max(a, b)
    bps = np.linspace(0, 1, n + 1)
    ref, _ = spi.quad(lambda u: float(prof.value(u)), s, t, points=bps[(bps > s) & (bps < t)],
                      limit=200, epsabs=1e-13)
    assert prof.integral(s, t) == pytest.approx(ref, abs=1e-10)


@given(values)
def test_piecewise_primitive_monotone_for_positive_values(vals):
    prof = cf.PiecewiseProfile.from_arrays(np.linspace(0, 1, len(vals) + 1), vals)
    t = np.linspace(-0.2, 1.2, 57)
    assert np.all(np.diff(prof.primitive(t)) > 0)


def test_piecewise_rejects_bad_breakpoints():
    with pytest.raises(DomainError):
        cf.PiecewiseProfile.from_arrays([0.0, 0.5, 0.4], [1.0, 1.0])
    with pytest.raises(DomainError):
        cf.PiecewiseProfile.from_arrays([0.0, 1.0], [1.0, 1.0])


def test_sine_profile_primitive_closed_form():
    p = cf.SineProfile(1.0, 0.4, 3.0)
    t = np.array([0.1, 0.7, 2.0])
    ref = t + 0.4 * (1 - np.cos(3 * t)) / 3
    np.testing.assert_allclose(p.primitive(t), ref, atol=1e-12)


@given(st.floats(-0.9, 0.9), st.floats(-5, 5))
def test_tanh_factor_gradient_matches_difference(kappa, x):
    S = cf.TanhDiagonal(kappa)
    h = 1e-6
    fd = (S.value(np.array([x + h])) - S.value(np.array([x - h]))) / (2 * h)
    np.testing.assert_allclose(S.grad(np.array([x]))[..., 0], fd, atol=1e-8)


def test_random_breakpoints_deterministic_and_in_range():
    a = cf.random_breakpoints(64, 0.25, 1.0, 1.3, seed=7)
    b = cf.random_breakpoints(64, 0.25, 1.0, 1.3, seed=7)
    assert a == b
    assert 1.0 <= a.inf and a.sup <= 1.3
    assert len(a.breakpoints) == 65


def test_field_ellipticity_and_lipschitz(tanh_field):
    ok, lo, hi = cf.check_ellipticity(tanh_field, T=0.25)
    assert ok and 1 / tanh_field.lam <= lo <= hi <= tanh_field.lam
    ok, ratio = cf.check_lipschitz(tanh_field, T=0.25)
    assert ok and 0 < ratio <= tanh_field.lipschitz


def test_ellipticity_check_detects_violation():
    prof = cf.PiecewiseProfile.from_arrays([0, 0.5, 1], [1.0, 3.0])
    f = cf.piecewise_field(prof, cf.TanhDiagonal(0.25), lam=2.0)
    assert not cf.check_ellipticity(f)[0]


def test_field_integrate_against_quad(tanh_field):
    z = np.array([0.4])
    s, t = 0.03, 0.21
    ref, _ = spi.quad(lambda u: float(tanh_field(z, u)[0, 0]), s, t,
                      points=tanh_field.breakpoints, limit=200)
    A = tanh_field.integrate(z, s, t)
    A = getattr(A, "matrix", A)
    assert float(np.asarray(A).ravel()[0]) == pytest.approx(ref, rel=1e-10)


@given(st.sampled_from(["sin", "tanh"]), st.floats(-3, 3))
def test_link_derivative(name, y):
    link = cf.Link(name, 1.0, 0.3)
    h = 1e-6
    assert link.deriv(y) == pytest.approx((link.value(y + h) - link.value(y - h)) / (2 * h),
                                          abs=1e-8)
    assert link.inf <= link.value(y) <= link.sup


def test_diffusion_realize_reads_left_endpoint():
    coeff = cf.DiffusionCoefficient((cf.TanhDiagonal(0.25),), (cf.Link("sin", 1.0, 0.3),), 2.0)
    times = np.linspace(0, 1, 5)
    xi = np.array([0.0, 1.0, -1.0, 0.5, 2.0])
    f = coeff.realize(times, xi)
    x = np.array([0.3])
    for k in range(4):
        mid = 0.5 * (times[k] + times[k + 1])
        np.testing.assert_allclose(f(x, mid), coeff.a(x, xi[k]))
