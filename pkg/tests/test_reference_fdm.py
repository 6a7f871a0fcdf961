import numpy as np
import pytest
from scipy.stats import norm

from parametrix_spde import coeff_fields as cf
from parametrix_spde.errors import DomainError
from parametrix_spde.reference_fdm import FdmConfig, fdm_axis, gamma_oracle, mollified_dirac, solve


def test_mollified_dirac_has_unit_mass():
    ax = np.linspace(-3, 3, 601)
    u = mollified_dirac([ax], 0.1, 0.05)
    assert u.sum() * (ax[1] - ax[0]) == pytest.approx(1.0, rel=1e-12)


def test_constant_coefficient_matches_heat_kernel():
    # a mollified Dirac evolves into a Gaussian of variance 2 c (t - s) + sigma0^2
    c, s, t = 1.3, 0.0, 0.1
    f = cf.constant_field(c=c, lam=2.0)
    cfg = FdmConfig(h=0.01, tau=2e-4)
    x = np.linspace(-1.0, 1.0, 11)
    res = gamma_oracle(f, x, t, 0.0, s, cfg, richardson=False)
    ref = norm(scale=np.sqrt(2 * c * (t - s) + cfg.sigma0 ** 2)).pdf(x)
    np.testing.assert_allclose(res.values[0], ref, atol=1e-3 * ref.max())
    assert res.mass[0] == pytest.approx(1.0, abs=1e-8)


def test_divergence_form_conserves_mass(tanh_field):
    res = gamma_oracle(tanh_field, [0.0], [0.05, 0.2], 0.3, 0.0, FdmConfig(h=0.02, tau=5e-4),
                       richardson=False)
    np.testing.assert_allclose(res.mass, 1.0, atol=1e-8)


def test_refinement_error_estimate_is_small(tanh_field):
    res = gamma_oracle(tanh_field, np.linspace(-0.5, 0.5, 5), 0.1, 0.0, 0.0,
                       FdmConfig(h=0.02, tau=5e-4))
    assert np.max(res.error_estimate) < 5e-3 * np.max(res.values)


def test_two_dimensional_constant_diagonal():
    f = cf.constant_field(np.diag([1.0, 1.5]), dim=2, lam=2.0)
    cfg = FdmConfig(h=0.025, tau=5e-4, L=3.0)
    t = 0.08
    x = np.array([[0.0, 0.0], [0.2, -0.3]])
    res = gamma_oracle(f, x, t, np.zeros(2), 0.0, cfg, richardson=False)
    v = 2 * np.array([1.0, 1.5]) * t + cfg.sigma0 ** 2
    ref = np.prod(norm(scale=np.sqrt(v)).pdf(x), axis=1)
    np.testing.assert_allclose(res.values[0], ref, rtol=1e-2)
    assert res.mass[0] == pytest.approx(1.0, abs=1e-6)


def test_rejects_too_short_horizon(tanh_field):
    with pytest.raises(DomainError):
        gamma_oracle(tanh_field, [0.0], 1e-4, 0.0, 0.0, FdmConfig(tau=2e-4))
    with pytest.raises(DomainError):
        solve(tanh_field, np.zeros(5), 0.2, 0.1, FdmConfig())


def test_axis_is_centered():
    ax = fdm_axis(FdmConfig(h=0.1, L=1.0, center=0.5), 2.0, 1.0)
    assert ax[0] == pytest.approx(-0.5) and ax[-1] == pytest.approx(1.5) and len(ax) == 21
