"""Fundamental solution Gamma = Z + Z * Phi, its gradient, and the
verification battery (semigroup, mass, Gaussian envelopes)."""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np

from .coeff_fields import CoefficientField
from .errors import DomainError
from .kernel_iteration import (LevelGrid, Source, Sweep, SweepConfig, cauchy_sweep,
                               dirac_sweep, series_diagnostics, _as_points)
from .parametrix import (EnvelopeFit, GaussianEnvelope, decay_from_lambda, fit_amplitude,
                         gaussian_derivatives)

EPS_NEG = 1e-10


@dataclass
class FundamentalSolution:
    """Lazily assembled Gamma for one coefficient field on [0, T].

    Sweeps are cached per source point (y, s); evaluations at arbitrary
    (x, t) with s < t <= T reuse the cached level data.
    """

    field: CoefficientField
    T: float = 1.0
    cfg: SweepConfig = SweepConfig()
    _sweeps: dict = dc_field(default_factory=dict, repr=False)

    def sweep(self, y, s) -> Sweep:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        key = (tuple(np.round(y, 14)), round(float(s), 14))
        if key not in self._sweeps:
            self._sweeps[key] = dirac_sweep(self.field, y, s, self.T, self.cfg, gradient=True)
        return self._sweeps[key]

    def refined(self, factor=2) -> "FundamentalSolution":
        return FundamentalSolution(self.field, self.T, self.cfg.refined(factor))

    def _check(self, t, s):
        if not s < t:
            raise DomainError(f"need s < t, got s={s}, t={t}")
        if t > self.T + 1e-12 or s < 0:
            raise DomainError(f"times must lie in [0, {self.T}]")

    def gamma(self, x, t, y, s, grad=False):
        self._check(t, s)
        d = self.field.dim
        X = _as_points(x, d)
        if self.field.x_independent:
            A = self.field.integrate(np.atleast_1d(np.asarray(y, float)), s, t)
            ders = gaussian_derivatives(np.broadcast_to(A, (len(X), d, d)),
                                        X - np.atleast_1d(np.asarray(y, float)), 1 if grad else 0)
            return ders[1] if grad else ders[0]
        res = self.sweep(y, s).evaluate(X, t)
        return res["V"][:, :, 0] if grad else res["U"][:, 0]

    def series(self, y, s):
        return series_diagnostics(self.sweep(y, s))


def eval_Gamma(fs: FundamentalSolution, x, t, y, s):
    """Gamma(x, t, y, s) for one source and one or more points x."""
    v = fs.gamma(x, t, y, s)
    return float(v[0]) if np.size(v) == 1 else v


def grad_Gamma(fs: FundamentalSolution, x, t, y, s):
    """Spatial gradient in x, shape (n, d) (or (d,) for a single point)."""
    g = fs.gamma(x, t, y, s, grad=True)
    return g[0] if len(g) == 1 else g


# ---------------------------------------------------------------------------
# Cauchy problems on a box
# ---------------------------------------------------------------------------

def cauchy_box(field: CoefficientField, center, s, t, resolve=None, half_width=None,
               width_factor=12.0):
    """Box grid around ``center`` wide enough for the Gaussian tail over
    (s, t) and fine enough to resolve data of scale ``resolve``."""
    lam = field.lam
    L = half_width if half_width is not None else width_factor * np.sqrt(lam * (t - s))
    h = 0.3 * np.sqrt(2 * (t - s) / lam)
    if resolve is not None:
        h = min(h, 0.3 * resolve)
    return LevelGrid.box(center, L, h)


def propagate(fs: FundamentalSolution, init_fn, x, t, r, n_levels=None, grid=None,
              gradient=False):
    """int Gamma(x, t, z, r) f(z) dz for ``f = init_fn(points)``."""
    fs._check(t, r)
    d = fs.field.dim
    X = _as_points(x, d)
    grid = grid or cauchy_box(fs.field, np.mean(X, axis=0), r, t)
    n = n_levels or max(8, fs.cfg.n_levels // 2)
    times = r + (t - r) * np.arange(n + 1) / n
    init = np.asarray(init_fn(grid.points()), dtype=float)
    cfg = SweepConfig(n_levels=n, m_max=1, mode="resolvent", block=fs.cfg.block)
    sw = cauchy_sweep(fs.field, grid, times, [Source(0, init=init)], cfg, gradient=gradient,
                      outputs=False)
    res = sw.evaluate(X, t)
    return res["V"][:, :, 0] if gradient else res["U"][:, 0]


def chapman_kolmogorov_residual(fs: FundamentalSolution, x, t, y, s, r, relative=True):
    """|int Gamma(x,t,z,r) Gamma(z,r,y,s) dz - Gamma(x,t,y,s)| for s < r < t."""
    if not s < r < t:
        raise DomainError("need s < r < t")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    grid = cauchy_box(fs.field, y, s, t, resolve=np.sqrt(2 * (r - s) / fs.field.lam))
    inner = lambda z: fs.gamma(z, r, y, s)
    lhs = propagate(fs, inner, x, t, r, grid=grid)
    rhs = fs.gamma(x, t, y, s)
    res = np.abs(lhs - rhs)
    if relative:
        res = res / np.max(np.abs(rhs))
    return float(np.max(res))


def mass_conservation_residual(fs: FundamentalSolution, x, t, s):
    """|int Gamma(x, t, y, s) dy - 1|, via the Cauchy problem with data 1."""
    fs._check(t, s)
    val = propagate(fs, lambda z: np.ones(len(z)), x, t, s)
    return float(np.max(np.abs(val - 1.0)))


# ---------------------------------------------------------------------------
# Gaussian envelopes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitDesign:
    """Sample set for envelope fits: sources, times and scaled offsets."""

    sources: tuple = (-1.0, 0.0, 1.0)
    s: float = 0.0
    time_fracs: tuple = (0.0625, 0.125, 0.25, 0.5, 1.0)
    n_u: int = 33
    span: Optional[float] = None          # |u| <= span; default 4 sqrt(lambda)

    def densified(self) -> "FitDesign":
        fr = sorted(set(self.time_fracs) | {0.5 * (a + b) for a, b in
                                             zip(self.time_fracs[:-1], self.time_fracs[1:])})
        return FitDesign(self.sources, self.s, tuple(fr), 2 * self.n_u - 1, self.span)


def sample_values(fs: FundamentalSolution, order: int, design: FitDesign):
    """Yield (w, tau, |value|) arrays on the design for Gamma (order 0) or
    grad Gamma (order 1)."""
    lam = fs.field.lam
    d = fs.field.dim
    span = design.span if design.span is not None else 4.0 * np.sqrt(lam)
    u = np.linspace(-span, span, design.n_u)
    U = np.stack([m.ravel() for m in np.meshgrid(*([u] * d), indexing="ij")], -1)
    out_w, out_tau, out_v = [], [], []
    for y in design.sources:
        yv = np.full(d, float(y))
        for fr in design.time_fracs:
            t = design.s + fr * (fs.T - design.s)
            tau = t - design.s
            X = yv + U * np.sqrt(tau)
            v = fs.gamma(X, t, yv, design.s, grad=order == 1)
            mag = np.abs(v) if order == 0 else np.sqrt(np.sum(v * v, axis=-1))
            out_w.append(X - yv)
            out_tau.append(np.full(len(X), tau))
            out_v.append(mag)
    return np.concatenate(out_w), np.concatenate(out_tau), np.concatenate(out_v)


def aronson_fit(fs: FundamentalSolution, order: int = 0, design: FitDesign = FitDesign(),
                tol: float = 0.05, refined: Optional[FundamentalSolution] = None) -> EnvelopeFit:
    """Amplitude fit of (t-s)^{order/2} |d^order Gamma| <= g_{rho, C} with C
    fixed from lambda; stable if a refined solver on a denser design moves
    the amplitude by less than ``tol``."""
    C = decay_from_lambda(fs.field.lam)
    d = fs.field.dim
    w, tau, v = sample_values(fs, order, design)
    c1 = fit_amplitude(v, w, tau, d, order / 2, C)
    fine = refined if refined is not None else fs.refined()
    w2, tau2, v2 = sample_values(fine, order, design.densified())
    c2 = fit_amplitude(v2, w2, tau2, d, order / 2, C)
    drift = abs(c2 / c1 - 1.0) if c1 > 0 else np.inf
    return EnvelopeFit(GaussianEnvelope(c1, C, d), GaussianEnvelope(c2, C, d), 1.0 + drift,
                       bool(np.isfinite(drift) and drift < tol), 1.0 + tol)


def collapse_points(fs: FundamentalSolution, order: int, design: FitDesign, env: GaussianEnvelope):
    """Rows (|w|^2 / tau, tau^{(order+d)/2} |value| e^{C|w|^2/tau}, c) for collapse plots."""
    d = fs.field.dim
    w, tau, v = sample_values(fs, order, design)
    r2 = np.sum(w * w, axis=-1) / tau
    scaled = v * tau ** ((order + d) / 2) * np.exp(env.C * r2)
    return np.stack([r2, scaled, np.full(len(r2), env.c)], -1)
