import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import multivariate_normal

from parametrix_spde.errors import DomainError
from parametrix_spde.parametrix import (GaussianEnvelope, decay_from_lambda, eval_Z,
                                        fit_amplitude, gaussian_derivatives, malliavin_Z,
                                        malliavin_grad_Z)


def spd(draw_vals):
    a, b, c = draw_vals
    L = np.array([[a, 0.0], [b, c]])
    return L @ L.T + 0.05 * np.eye(2)


mats = st.tuples(st.floats(0.3, 1.5), st.floats(-0.8, 0.8), st.floats(0.3, 1.5)).map(spd)
vecs = st.tuples(st.floats(-2, 2), st.floats(-2, 2)).map(np.array)


@given(mats, vecs)
def test_Z_is_gaussian_with_covariance_2A(A, w):
    ref = multivariate_normal(mean=np.zeros(2), cov=2 * A).pdf(w)
    assert gaussian_derivatives(A, w)[0] == pytest.approx(ref, rel=1e-12)


@given(mats, vecs)
def test_Z_symmetric_in_w(A, w):
    assert gaussian_derivatives(A, w)[0] == pytest.approx(gaussian_derivatives(A, -w)[0],
                                                          rel=1e-14)


@given(mats, vecs, st.integers(1, 4))
def test_derivatives_match_finite_differences(A, w, order):
    ders = gaussian_derivatives(A, w, order)
    h = 1e-5
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        up = gaussian_derivatives(A, w + e, order - 1)[order - 1]
        dn = gaussian_derivatives(A, w - e, order - 1)[order - 1]
        fd = (up - dn) / (2 * h)
        np.testing.assert_allclose(ders[order][..., i], fd, atol=2e-6 * (1 + np.max(np.abs(fd))))


def test_scalar_recurrence_matches_general_path():
    A = np.array([[0.7]])
    w = np.linspace(-2, 2, 9)[:, None]
    d1 = gaussian_derivatives(np.broadcast_to(A, (9, 1, 1)), w, 4)
    h = 1e-4
    for k in range(1, 5):
        up = gaussian_derivatives(np.broadcast_to(A, (9, 1, 1)), w + h, k - 1)[k - 1]
        dn = gaussian_derivatives(np.broadcast_to(A, (9, 1, 1)), w - h, k - 1)[k - 1]
        np.testing.assert_allclose(d1[k][..., 0], (up - dn) / (2 * h), atol=1e-6)


def test_rejects_non_positive_matrix():
    with pytest.raises(DomainError):
        gaussian_derivatives(np.array([[0.0]]), np.array([0.1]))


@given(mats, vecs)
def test_malliavin_Z_is_directional_derivative_in_A(A, w):
    D = np.array([[0.3, 0.1], [0.1, -0.2]])
    eps = 1e-6
    fd = (gaussian_derivatives(A + eps * D, w)[0] - gaussian_derivatives(A - eps * D, w)[0]) / (2 * eps)
    assert malliavin_Z(A, D, w) == pytest.approx(fd, rel=1e-5, abs=1e-10)
    g = malliavin_grad_Z(A, D, w)
    fdg = (gaussian_derivatives(A + eps * D, w, 1)[1] - gaussian_derivatives(A - eps * D, w, 1)[1]) / (2 * eps)
    np.testing.assert_allclose(g, fdg, rtol=1e-5, atol=1e-10)


def test_eval_Z_mass_one():
    A = np.array([[0.4]])
    x = np.linspace(-10, 10, 4001)[:, None]
    z = eval_Z(np.broadcast_to(A, (len(x), 1, 1)), x).value
    assert np.trapezoid(z, x[:, 0]) == pytest.approx(1.0, abs=1e-12)


def test_fit_amplitude_recovers_envelope():
    env = GaussianEnvelope(0.7, decay_from_lambda(2.0), 1)
    w = np.linspace(-3, 3, 61)[:, None]
    tau = np.full(61, 0.1)
    vals = env(w, tau)
    assert fit_amplitude(vals, w, tau, 1, 0.0, env.C) == pytest.approx(0.7, rel=1e-12)
