import numpy as np
import pytest

from parametrix_spde import coeff_fields as cf
from parametrix_spde.errors import DomainError
from parametrix_spde.kernel_iteration import (KernelTable, LevelGrid, Source, SweepConfig,
                                              build_Phi, cauchy_sweep, convolve, dirac_sweep,
                                              eval_K, series_diagnostics)
from parametrix_spde.parametrix import gaussian_derivatives

Y = np.array([[0.2]])
T = 0.25


@pytest.fixture(scope="module")
def field():
    prof = cf.random_breakpoints(4, T, 1.0, 1.3, seed=7)
    return cf.piecewise_field(prof, cf.TanhDiagonal(0.25), lam=2.0)


@pytest.fixture(scope="module")
def sweep(field):
    return dirac_sweep(field, Y[0], 0.0, T, SweepConfig(n_levels=24), gradient=False)


def test_K_vanishes_for_constant_coefficients():
    prof = cf.PiecewiseProfile.from_arrays([0.0, 1.0], [1.2])
    f = cf.piecewise_field(prof, cf.TanhDiagonal(0.0), lam=2.0)
    x = np.linspace(-2, 2, 41)[:, None]
    assert np.max(np.abs(eval_K(f, x, 0.3, Y, 0.1))) < 1e-14


def test_K_matches_finite_difference_operator(field):
    # K = div_x(a(x,t) grad_x Z) - d_t Z with Z frozen at the pole y
    y, s, t = 0.2, 0.0, 0.17
    x = np.linspace(-0.8, 1.2, 9)
    h, k = 1e-4, 1e-6

    def Z(xv, tv):
        A = field.integrate(np.array([[y]]), s, tv)
        return gaussian_derivatives(A, (np.atleast_1d(xv) - y)[:, None], 0)[0]

    def flux(xv):
        grad = (Z(xv + h, t) - Z(xv - h, t)) / (2 * h)
        return field(xv[:, None], t)[:, 0, 0] * grad

    div = (flux(x + h) - flux(x - h)) / (2 * h)
    dt = (Z(x, t + k) - Z(x, t - k)) / (2 * k)
    K = eval_K(field, x[:, None], t, np.array([[y]]), s)
    np.testing.assert_allclose(K, div - dt, atol=2e-4 * np.max(np.abs(K)))


def test_first_sweep_column_is_K(field, sweep):
    j = len(sweep.times) - 1
    pts = sweep.grids[j].points()
    K = eval_K(field, pts, sweep.times[j], Y, 0.0)
    np.testing.assert_allclose(sweep.combined_state(j)[:, 0, 0], K, atol=1e-14)


def test_second_iterate_converges_to_brute_force_convolution(field, sweep):
    # first-order convergence in the number of levels toward the direct double integral
    ref = convolve(lambda x, t, z, r: eval_K(field, x[None, :], t, z, r),
                   lambda z, r, y, s: eval_K(field, z, r, y[None, :], s),
                   0.5, T, 0.2, 0.0, lam=2.0, n_theta=256)
    errs = []
    for sw in (sweep, dirac_sweep(field, Y[0], 0.0, T, SweepConfig(n_levels=48), gradient=False)):
        k2 = sw.evaluate(np.array([[0.5]]), T, need_state=True)["state"][0, 0, 1, 0]
        errs.append(abs(k2 - ref))
    assert errs[1] < 0.7 * errs[0]
    assert errs[1] < 0.15 * abs(ref)


def test_series_terms_decay(sweep):
    diag = series_diagnostics(sweep)
    assert diag.converged and diag.m_stop <= 8
    assert max(diag.ratios[: diag.m_stop - 1]) < 0.5


def test_build_Phi_sums_series_up_to_stop(field, sweep):
    val, diag = build_Phi(field, 0.5, T, 0.2, 0.0, sweep=sweep)
    mT = float(field.terms[0][1].value(T))
    cols = mT * sweep.evaluate(np.array([[0.5]]), T, need_state=True)["state"][0, 0, :, 0]
    assert val == pytest.approx(cols[: diag.m_stop].sum(), rel=1e-12)
    with pytest.raises(DomainError):
        build_Phi(field, 0.5, 0.0, 0.2, 0.1)


def test_kernel_table_round_trip(sweep, tmp_path):
    tab = KernelTable.from_sweep(sweep)
    path = tmp_path / "k.bin"
    tab.write(path)
    back = KernelTable.read(path)
    assert back.kind == tab.kind
    np.testing.assert_array_equal(back.times, tab.times)
    for a, b in zip(tab.values[1:], back.values[1:]):
        np.testing.assert_array_equal(a, b)


def test_cauchy_sweep_conserves_constants(field):
    grid = LevelGrid.box((0.2,), 6.0, 0.05)
    times = 0.05 + 0.15 * np.arange(17) / 16
    cfg = SweepConfig(n_levels=16, m_max=1, mode="resolvent")
    sw = cauchy_sweep(field, grid, times, [Source(0, init=np.ones(grid.size))], cfg, outputs=False)
    u = sw.evaluate(np.array([[-0.5], [0.2], [1.0]]), times[-1])["U"][:, 0]
    np.testing.assert_allclose(u, 1.0, atol=1e-4)
