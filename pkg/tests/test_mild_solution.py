import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from parametrix_spde import coeff_fields as cf
from parametrix_spde.errors import ConfigError, DomainError, UnsupportedOperation
from parametrix_spde.fundamental_solution import FundamentalSolution, propagate
from parametrix_spde.kernel_iteration import SweepConfig
from parametrix_spde.malliavin import euler_paths, first_variation, ou_spec, simulate_paths, sine_spec
from parametrix_spde.mild_solution import (TAG_ALPHA, TAG_D3, TAG_N, AlphaParams, BankConfig,
                                           MildSolutionEstimate, NoiseField, SeparableModel,
                                           bank_for, bump, coarsen, deterministic_variance,
                                           initial_condition_term, ito_adapted, skorohod_integral,
                                           small_time_decay, variance_check, volume_potential)

T = 0.25
PROF = cf.random_breakpoints(4, T, 1.0, 1.3, seed=7)
FIELD = cf.piecewise_field(PROF, cf.TanhDiagonal(0.25), lam=2.0)
SMALL = BankConfig(n_tau=8, n_out=8, sweep=SweepConfig(n_levels=16))


@pytest.fixture(scope="module")
def bank():
    return bank_for(SeparableModel.from_field(FIELD), NoiseField(N=1.0), T, [0.0, 0.5], SMALL)


# -- exponents ---------------------------------------------------------------

@given(st.integers(1, 3), st.floats(0.01, 40), st.floats(0.01, 60))
def test_admissible_exponents_satisfy_chain(d, dq, dp):
    q = 2 * d + 4 + dq
    a = AlphaParams(p=q + dp, q=q, d=d)
    lo, hi = a.interval
    assert lo < a.value < hi
    assert a.kappa == pytest.approx(2 * a.p * a.q / (a.p + a.q))
    assert a.kappa > 2 * d + 4


@given(st.integers(1, 3), st.floats(0.0, 6.0), st.floats(0.0, 10.0))
def test_exponents_outside_chain_rejected(d, q, dp):
    assume(q <= 2 * d + 4)
    with pytest.raises(ConfigError) as exc:
        AlphaParams(p=q + dp, q=q, d=d)
    assert exc.value.tag == TAG_D3


def test_alpha_outside_interval_rejected():
    lo, hi = AlphaParams().interval
    for bad in (lo, hi, 0.5, 0.99):
        with pytest.raises(ConfigError) as exc:
            AlphaParams(alpha=bad)
        assert exc.value.tag == TAG_ALPHA
    assert AlphaParams(alpha=0.5 * (lo + hi)).value == pytest.approx(AlphaParams().value)


# -- noise -------------------------------------------------------------------

def test_noise_order_gate():
    with pytest.raises(ConfigError) as exc:
        NoiseField(N=0.5)
    assert exc.value.tag == TAG_N
    NoiseField(N=1.01, dim=2)


@given(st.floats(0.6, 4.0), st.sampled_from(["sin", "tanh", "const"]), st.floats(0.0, 0.5))
def test_noise_dominated_by_envelope(N, name, amp):
    noise = NoiseField(N=N, link=cf.Link(name, 1.0, amp))
    g, gt = noise.check_decay(np.linspace(-5, 5, 41), np.linspace(-30, 30, 241))
    assert g <= 1 + 1e-12 and gt <= 1 + 1e-12


# -- models and clocks -------------------------------------------------------

def test_multi_term_coefficient_unsupported():
    two = cf.CoefficientField(FIELD.terms * 2, lam=4.0)
    with pytest.raises(UnsupportedOperation):
        SeparableModel.from_field(two)
    coeff = cf.DiffusionCoefficient((cf.TanhDiagonal(0.1),) * 2, (cf.Link("sin", 1.0, 0.2),) * 2, 3.0)
    with pytest.raises(UnsupportedOperation):
        SeparableModel.from_diffusion(coeff)


def test_time_change_reproduces_path_solution():
    # Gamma(x, t, y, s) = Gamma_S(x, y, theta_t - theta_s) for a = S(x) m(t)
    model = SeparableModel.from_field(FIELD)
    ref = FundamentalSolution(model.reference_field(), PROF.integral(0, T) + 1e-9,
                              SweepConfig(n_levels=24))
    fs = FundamentalSolution(FIELD, T, SweepConfig(n_levels=24))
    x = np.linspace(-0.6, 1.0, 5)
    th = PROF.integral(0.05, 0.25)
    np.testing.assert_allclose(fs.gamma(x, 0.25, 0.2, 0.05), ref.gamma(x, th, 0.2, 0.0),
                               atol=2e-3 * np.max(fs.gamma(x, 0.25, 0.2, 0.05)))


def test_clock_derivative_matches_bump():
    spec = sine_spec()
    coeff = cf.DiffusionCoefficient((cf.TanhDiagonal(0.25),), (cf.Link("sin", 1.0, 0.3),), 2.0)
    model = SeparableModel.from_diffusion(coeff)
    b = first_variation(simulate_paths(spec, 1, 0.02, 4, T=0.4), spec)
    clock = model.clock(b)
    eps = 1e-6
    for i in (0, 5, 12):
        th = []
        for sgn in (1, -1):
            dB = b.dB.copy()
            dB[0, i, 0] += sgn * eps
            xi = euler_paths(spec, b.times, dB)[:, :-1, 0]
            th.append(np.concatenate([[0.0], np.cumsum(coeff.links[0].value(xi[0]) * b.step)]))
        np.testing.assert_allclose(clock.dtheta[0, i], (th[0] - th[1]) / (2 * eps), atol=1e-8)


# -- tables and integrals ----------------------------------------------------

def test_bank_matches_cauchy_problem(bank):
    fs = FundamentalSolution(FIELD, T, SweepConfig(n_levels=16))
    noise = bank.noise
    w = propagate(fs, lambda z: noise.phi(z[:, 0]), np.array([[0.0], [0.5]]), 0.25, 0.05)
    np.testing.assert_allclose(bank.W_at(PROF.integral(0.05, 0.25), np.array([0.0, 0.5])), w,
                               rtol=1e-4)


def test_deterministic_coefficient_needs_no_correction(bank):
    b = simulate_paths(ou_spec(), 400, T / 16, 5, T=T)
    sk = skorohod_integral(bank, b, T)
    np.testing.assert_array_equal(sk.samples, ito_adapted(bank, b, T).samples)
    _, _, z = variance_check(sk, deterministic_variance(bank, b, T))
    assert np.all(z < 4)


def test_grid_mismatch_rejected(bank):
    b = simulate_paths(ou_spec(), 2, T / 16, 5, T=T)
    with pytest.raises(DomainError):
        skorohod_integral(bank, b, 0.1)


def test_coarsen_sums_increments():
    spec = sine_spec()
    b = first_variation(simulate_paths(spec, 3, 0.01, 2, T=0.2), spec)
    c = coarsen(b, spec)
    np.testing.assert_allclose(c.dB[:, 3], b.dB[:, 6] + b.dB[:, 7])
    assert c.D is not None and c.times[-1] == b.times[-1]
    with pytest.raises(DomainError):
        coarsen(simulate_paths(spec, 1, 0.2 / 5, 2, T=0.2), spec)


def test_bump_is_compactly_supported_and_smooth():
    f, df = bump(1.5)
    y = np.linspace(-2, 2, 801)
    assert np.all(f(y)[np.abs(y) >= 1.5] == 0) and f(np.array([0.0]))[0] == pytest.approx(np.exp(-1))
    h = 1e-6
    inner = y[np.abs(y) < 1.4]
    np.testing.assert_allclose(df(inner), (f(inner + h) - f(inner - h)) / (2 * h), atol=1e-7)


def test_small_time_decay_recovers_power_law():
    rng = np.random.default_rng(0)
    g = rng.standard_normal((2000, 3))
    ests = [MildSolutionEstimate.from_samples([0.0, 1.0, 2.0], h, np.sqrt(h) * g, "synthetic")
            for h in (0.01, 0.02, 0.04)]
    fit = small_time_decay(ests, 4.0)
    assert fit.slope == pytest.approx(2.0, abs=1e-10) and fit.passed
    zero = [MildSolutionEstimate.from_samples([0.0], h, np.zeros((5, 1)), "zero") for h in (0.1, 0.2)]
    assert small_time_decay(zero, 4.0).trivial


def test_volume_potential_of_constant_source():
    fs = FundamentalSolution(FIELD, T, SweepConfig(n_levels=16))
    V, gV = volume_potential(fs, lambda y, s: np.ones(len(y)), np.array([[-0.3], [0.4]]), 0.2)
    np.testing.assert_allclose(V, 0.2, rtol=1e-4)
    np.testing.assert_allclose(gV, 0.0, atol=1e-4)


def test_initial_condition_growth_guard():
    fs = FundamentalSolution(FIELD, T, SweepConfig(n_levels=16))
    u = initial_condition_term(fs, lambda y: np.ones(len(y)), np.array([[0.1]]), 0.2)
    assert u[0] == pytest.approx(1.0, abs=1e-4)
    with pytest.raises(DomainError):
        initial_condition_term(fs, lambda y: np.exp(5 * y[:, 0] ** 2), np.array([[0.1]]), 0.2)
