import numpy as np
import pytest
from scipy.stats import norm

from parametrix_spde import coeff_fields as cf
from parametrix_spde.errors import DomainError
from parametrix_spde.fundamental_solution import (FundamentalSolution, chapman_kolmogorov_residual,
                                                  eval_Gamma, grad_Gamma,
                                                  mass_conservation_residual)
from parametrix_spde.kernel_iteration import SweepConfig
from parametrix_spde.reference_fdm import FdmConfig, gamma_oracle

T = 0.25


@pytest.fixture(scope="module")
def fs():
    prof = cf.random_breakpoints(4, T, 1.0, 1.3, seed=7)
    field = cf.piecewise_field(prof, cf.TanhDiagonal(0.25), lam=2.0)
    return FundamentalSolution(field, T, SweepConfig(n_levels=24))


def test_x_independent_field_gives_closed_form():
    prof = cf.PiecewiseProfile.from_arrays([0.0, 0.1, 0.3], [1.0, 1.3])
    field = cf.piecewise_field(prof, cf.TanhDiagonal(0.0), lam=2.0)
    g = FundamentalSolution(field, 0.3)
    x = np.linspace(-1, 1, 7)
    var = 2 * (1.0 * 0.05 + 1.3 * 0.15)
    np.testing.assert_allclose(g.gamma(x, 0.25, 0.0, 0.05),
                               norm(scale=np.sqrt(var)).pdf(x), rtol=1e-12)


def test_agrees_with_fdm(fs):
    x = np.linspace(-0.6, 1.0, 9)
    val = fs.gamma(x, 0.2, 0.2, 0.0)
    ref = gamma_oracle(fs.field, x, 0.2, 0.2, 0.0, FdmConfig(h=0.005, tau=1e-4), richardson=False)
    np.testing.assert_allclose(val, ref.values[0], atol=3e-3 * np.max(ref.values))


def test_mass_and_semigroup(fs):
    assert mass_conservation_residual(fs, np.array([[0.0], [0.7]]), 0.2, 0.02) < 1e-3
    assert chapman_kolmogorov_residual(fs, np.linspace(-0.5, 0.8, 5), 0.25, 0.2, 0.0, 0.1) < 5e-3


def test_gradient_matches_difference_quotient(fs):
    x = np.linspace(-0.5, 0.9, 6)
    h = 1e-4
    fd = (fs.gamma(x + h, 0.2, 0.2, 0.0) - fs.gamma(x - h, 0.2, 0.2, 0.0)) / (2 * h)
    g = grad_Gamma(fs, x, 0.2, 0.2, 0.0)[:, 0]
    np.testing.assert_allclose(g, fd, atol=1e-3 * np.max(np.abs(fd)))


def test_scalar_and_domain_errors(fs):
    assert isinstance(eval_Gamma(fs, 0.2, 0.2, 0.2, 0.0), float)
    with pytest.raises(DomainError):
        fs.gamma(0.0, 0.1, 0.2, 0.1)
    with pytest.raises(DomainError):
        fs.gamma(0.0, 0.3, 0.2, 0.0)
