import numpy as np
import pytest
import scipy.integrate as spi
from hypothesis import given, strategies as st

from parametrix_spde.errors import DomainError
from parametrix_spde.quadrature import beta_weight_cells, jacobi_rule, sin2_rule

alphas = st.floats(0.05, 0.95)


def test_sin2_rule_arcsine_integral():
    for s, t in [(0.0, 1.0), (0.2, 0.3), (-1.0, 5.0)]:
        r, w = sin2_rule(s, t, 8)
        assert np.sum(w / np.sqrt((t - r) * (r - s))) == pytest.approx(np.pi, abs=1e-12)


@given(alphas, st.floats(-1, 1), st.floats(0.01, 3))
def test_jacobi_weights_sum_to_beta(alpha, s, width):
    r, w = jacobi_rule(s, s + width, alpha, 7)
    assert np.sum(w) == pytest.approx(np.pi / np.sin(np.pi * alpha), rel=1e-12)
    assert np.all((r > s) & (r < s + width))


@given(alphas, st.integers(2, 30))
def test_beta_cells_sum_to_beta(alpha, n):
    e = np.sort(np.concatenate([[0.0, 1.0], np.random.default_rng(n).uniform(0, 1, n - 1)]))
    w = beta_weight_cells(e, 0.0, 1.0, alpha)
    assert np.all(w > 0)
    assert np.sum(w) == pytest.approx(np.pi / np.sin(np.pi * alpha), rel=1e-12)


@pytest.mark.parametrize("alpha", [0.3, 0.5, 0.76])
def test_beta_cells_match_adaptive_quadrature(alpha):
    s, t = 0.1, 0.6
    e = np.array([0.1, 0.12, 0.3, 0.31, 0.55, 0.6])
    w = beta_weight_cells(e, s, t, alpha)
    f = lambda r: (t - r) ** (alpha - 1) * (r - s) ** (-alpha)
    for k in range(len(e) - 1):
        ref, _ = spi.quad(f, e[k], e[k + 1], limit=200, epsabs=1e-13)
        assert w[k] == pytest.approx(ref, rel=1e-9)


def test_jacobi_rule_exact_for_polynomials():
    s, t, a = 0.0, 2.0, 0.4
    r, w = jacobi_rule(s, t, a, 5)
    ref, _ = spi.quad(lambda x: (t - x) ** (a - 1) * x ** (-a) * x ** 3, s, t, limit=200)
    assert np.sum(w * r ** 3) == pytest.approx(ref, rel=1e-9)


def test_domain_errors():
    with pytest.raises(DomainError):
        jacobi_rule(1.0, 1.0, 0.5, 3)
    with pytest.raises(DomainError):
        jacobi_rule(0.0, 1.0, 1.5, 3)
    with pytest.raises(DomainError):
        sin2_rule(1.0, 0.0, 3)
