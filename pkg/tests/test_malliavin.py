import numpy as np
import pytest
from hypothesis import given, strategies as st

from parametrix_spde import coeff_fields as cf
from parametrix_spde.errors import DomainError
from parametrix_spde.kernel_iteration import SweepConfig
from parametrix_spde.malliavin import (PathSolution, bump_first_variation, check_sde_lipschitz,
                                       coefficient_bump, first_variation, gamma_bump,
                                       malliavin_Gamma, malliavin_coefficient,
                                       malliavin_grad_Gamma, ou_spec, psi, simulate_paths,
                                       sine_spec)

COEFF = cf.DiffusionCoefficient((cf.TanhDiagonal(0.25),), (cf.Link("sin", 1.0, 0.3),), 2.0)


@pytest.fixture(scope="module")
def sine_bundle():
    spec = sine_spec()
    return spec, first_variation(simulate_paths(spec, 2, 0.05, 3, T=0.25), spec)


def test_ou_first_variation_closed_form():
    theta, sig, step = 0.8, 0.6, 0.01
    spec = ou_spec(theta, sig)
    b = first_variation(simulate_paths(spec, 1, step, 1, T=0.2), spec)
    n = len(b.times) - 1
    k, l = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    ref = np.where(l > k, sig * (1 - theta * step) ** np.maximum(l - k - 1, 0), 0.0)
    ref[np.diag_indices(n + 1)] = sig
    np.testing.assert_allclose(b.D[0, :, :, 0, 0], ref, rtol=1e-12)


@given(st.integers(0, 40), st.integers(0, 3))
def test_first_variation_matches_bump(k, path):
    spec = sine_spec()
    b = first_variation(simulate_paths(spec, 4, 0.02, 11, T=1.0), spec)
    fd = bump_first_variation(spec, b, path, k, eps=1e-5)[:, 0]
    np.testing.assert_allclose(b.D[path, k, k + 1:, 0, 0], fd[k + 1:], atol=1e-8)
    assert np.all(fd[: k + 1] == 0.0)


@given(st.integers(0, 2 ** 31), st.integers(0, 5), st.integers(1, 4))
def test_paths_independent_of_batching(seed, first, count):
    spec = sine_spec()
    whole = simulate_paths(spec, first + count, 0.05, seed, T=0.5)
    part = simulate_paths(spec, count, 0.05, seed, T=0.5, first=first)
    np.testing.assert_array_equal(part.dB, whole.dB[first:])
    np.testing.assert_array_equal(part.xi, whole.xi[first:])


def test_psi_is_running_max(sine_bundle):
    _, b = sine_bundle
    p = psi(b)
    mag = np.abs(b.D[..., 0, 0])
    for k in range(len(b.times)):
        np.testing.assert_allclose(p.values[:, k], mag[:, k, k:].max(axis=1))
    m, se = p.moment(2.0)
    assert m > 0 and np.isfinite(se)
    with pytest.raises(DomainError):
        psi(simulate_paths(sine_spec(), 1, 0.05, 0, T=0.25))


def test_sde_lipschitz_constant_respected():
    spec = sine_spec()
    sampled, der = check_sde_lipschitz(spec)
    assert sampled <= spec.lipschitz + 1e-12 and der <= spec.lipschitz + 1e-12


def test_coefficient_derivative_matches_bump(sine_bundle):
    spec, b = sine_bundle
    x = np.array([[-0.4], [0.3]])
    for r, t in [(0.02, 0.2), (0.12, 0.2), (0.2, 0.12)]:
        got = malliavin_coefficient(COEFF, b, x, t, r, path=1)[:, 0]
        np.testing.assert_allclose(got, coefficient_bump(COEFF, spec, b, x, t, r, path=1),
                                   atol=1e-8)


def test_gamma_derivative_matches_bump(sine_bundle):
    spec, b = sine_bundle
    cfg = SweepConfig(n_levels=16)
    ps = PathSolution(COEFF, b, 0, cfg)
    x = np.array([[0.1], [0.5]])
    r = np.array([0.02, 0.12])
    val = malliavin_Gamma(ps, x, 0.25, 0.2, 0.0, r)[:, :, 0]
    grad = malliavin_grad_Gamma(ps, x, 0.25, 0.2, 0.0, r)[:, :, 0, 0]
    for i, ri in enumerate(r):
        ref = gamma_bump(COEFF, spec, b, x, 0.25, 0.2, 0.0, ri, cfg=cfg)
        np.testing.assert_allclose(val[:, i], ref, rtol=1e-5, atol=1e-9)
        refg = gamma_bump(COEFF, spec, b, x, 0.25, 0.2, 0.0, ri, cfg=cfg, grad=True)[:, 0]
        np.testing.assert_allclose(grad[:, i], refg, rtol=1e-5, atol=1e-9)
