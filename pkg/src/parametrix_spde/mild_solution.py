"""Noise fields, the anticipating mild solution and its checks.

The stochastic experiments use single-term separable coefficients
a(x, t) = S(x) m(t), where m is either a deterministic profile or
m(t) = h(xi_l) on the noise cell [u_l, u_{l+1}).  With the clock
theta(t) = int_0^t m(u) du every such field is a time change of the
reference field S(x) * 1:

    Gamma(x, t, y, s) = Gamma_S(x, y, theta(t) - theta(s)),

so one set of kernel tables (built once with the parametrix engine) serves
all paths.  Malliavin derivatives act on the clock only:
D_r Gamma = d_tau Gamma_S * D_r(theta(t) - theta(s)).

Noise is G(y, s) = phi(y) c(xi_s) with phi(y) = (1 + y^2)^{-N/2}; with the
increments dB_i on [s_i, s_{i+1}) the discrete Skorohod integral of
F_i = int Gamma(x, t, y, s_i) G(y, s_i) dy is

    sum_i F_i dB_i - sum_i dF_i / d(dB_i) * Delta.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .coeff_fields import (CoefficientField, ConstantProfile, DiffusionCoefficient, Link,
                           SpatialFactor, TimeProfile)
from .errors import ConfigError, DomainError, UnsupportedOperation
from .fundamental_solution import FundamentalSolution, cauchy_box, propagate
from .kernel_iteration import LevelGrid, Source, SweepConfig, cauchy_sweep, _as_points
from .malliavin import PathBundle, SdeSpec, euler_paths, first_variation
from .parametrix import decay_from_lambda
from .quadrature import beta_weight_cells, jacobi_rule

TAG_D3 = "(D3) p > q > 2d+4"
TAG_ALPHA = "(alpha) 1/2 + (d+2)(p+q)/(4pq) < alpha < (q-1)/q"
TAG_N = "(D1) N > d/2"


# ---------------------------------------------------------------------------
# exponents
# ---------------------------------------------------------------------------

def alpha_interval(p, q, d):
    return 0.5 + (d + 2) * (p + q) / (4 * p * q), (q - 1) / q


@dataclass(frozen=True)
class AlphaParams:
    """Exponents (p, q), dimension and the fractional order alpha.

    ``alpha=None`` selects the midpoint of the admissible interval.
    """

    p: float = 14.0
    q: float = 7.0
    d: int = 1
    alpha: Optional[float] = None

    def __post_init__(self):
        p, q, d = self.p, self.q, self.d
        if not p > q > 2 * d + 4:
            raise ConfigError(f"got p={p}, q={q}, d={d}", TAG_D3)
        lo, hi = alpha_interval(p, q, d)
        # identities that hold under the exponent chain
        assert lo < hi
        assert (1 / p + 1 / q <= 1) == (self.kappa >= 2)
        r = (p + q) / (2 * p * q)
        assert 0.5 + r <= (q - 1) / q <= 1 - r <= (2 * p - 1) / (2 * p)
        if self.alpha is not None and not lo < self.alpha < hi:
            raise ConfigError(f"alpha={self.alpha} outside ({lo:.6g}, {hi:.6g})", TAG_ALPHA)

    @property
    def interval(self):
        return alpha_interval(self.p, self.q, self.d)

    @property
    def value(self) -> float:
        lo, hi = self.interval
        return float(self.alpha) if self.alpha is not None else 0.5 * (lo + hi)

    @property
    def kappa(self) -> float:
        """Moment order 2pq / (p + q)."""
        return 2 * self.p * self.q / (self.p + self.q)

    def as_dict(self):
        lo, hi = self.interval
        return {"p": self.p, "q": self.q, "d": self.d, "alpha": self.value,
                "alpha_interval": [lo, hi], "kappa": self.kappa}


# ---------------------------------------------------------------------------
# noise and coefficient models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseField:
    """G(y, s) = phi(y) c(xi_s), phi(y) = (1 + |y|^2)^{-N/2}."""

    N: float = 1.0
    link: Link = Link("const", 1.0, 0.0)
    dim: int = 1

    def __post_init__(self):
        if not self.N > self.dim / 2:
            raise ConfigError(f"N={self.N}, d={self.dim}", TAG_N)

    def phi(self, y):
        y = np.asarray(y, float)
        r2 = y * y if self.dim == 1 else np.sum(y * y, -1)
        return (1.0 + r2) ** (-self.N / 2)

    def G(self, y, xi):
        return self.phi(y) * self.link.value(xi)

    def dG(self, y, xi):
        """d G / d xi (the Malliavin chain-rule factor)."""
        return self.phi(y) * self.link.deriv(xi)

    @property
    def deterministic(self) -> bool:
        return self.link.amp == 0 or self.link.name == "const"

    def dominating(self, xi):
        """frak G(t) = 2^{N/2} max(|c(xi_t)|, |c'(xi_t)|) bounds both (1+|y|)^N |G|
        and (1+|y|)^N |G~|."""
        return 2 ** (self.N / 2) * np.maximum(np.abs(self.link.value(xi)),
                                              np.abs(self.link.deriv(xi)))

    def check_decay(self, xi, y):
        """max over samples of (1+|y|)^N |G| / frak G and of the G~ analogue."""
        y = np.asarray(y, float)
        xi = np.asarray(xi, float)
        w = (1 + np.abs(y)) ** self.N
        dom = self.dominating(xi)[:, None]
        g = np.abs(self.G(y[None, :], xi[:, None])) * w / dom
        gt = np.abs(self.dG(y[None, :], xi[:, None])) * w / dom
        return float(np.max(g)), float(np.max(gt))

    def describe(self):
        return {"N": self.N, "link": self.link.describe()}


@dataclass(frozen=True)
class SeparableModel:
    """a(x, t) = S(x) m(t) with m deterministic (``profile``) or driven by a
    diffusion through ``link``."""

    factor: SpatialFactor
    lam: float
    profile: Optional[TimeProfile] = None
    link: Optional[Link] = None
    label: str = ""

    @classmethod
    def from_field(cls, field: CoefficientField) -> "SeparableModel":
        if len(field.terms) != 1:
            raise UnsupportedOperation("time-change tables need a single-term coefficient")
        (S, m), = field.terms
        return cls(S, field.lam, profile=m, label=field.label)

    @classmethod
    def from_diffusion(cls, coeff: DiffusionCoefficient) -> "SeparableModel":
        if len(coeff.factors) != 1:
            raise UnsupportedOperation("time-change tables need a single-term coefficient")
        return cls(coeff.factors[0], coeff.lam, link=coeff.links[0], label=coeff.label)

    @property
    def random(self) -> bool:
        return self.link is not None and self.link.amp != 0 and self.link.name != "const"

    @property
    def m_sup(self) -> float:
        return float(self.link.sup if self.link is not None else self.profile.sup)

    def reference_field(self) -> CoefficientField:
        return CoefficientField(((self.factor, ConstantProfile(1.0)),), lam=self.lam,
                                kind="reference", label=self.label + "/ref")

    def path_field(self, bundle: PathBundle, path: int) -> CoefficientField:
        if self.link is None:
            return CoefficientField(((self.factor, self.profile),), lam=self.lam)
        coeff = DiffusionCoefficient((self.factor,), (self.link,), self.lam)
        return coeff.realize(bundle.times, bundle.xi[path, :, 0])

    def clock(self, bundle: PathBundle) -> "Clock":
        u = bundle.times
        if self.link is None:
            bps = np.asarray(getattr(self.profile, "breakpoints", ()), float)
            # dense knots keep smooth profiles accurate under linear interpolation
            knots = np.unique(np.concatenate([u, np.linspace(u[0], u[-1], 513),
                                              bps[(bps > u[0]) & (bps < u[-1])]]))
            th = np.asarray(self.profile.primitive(knots), float) - float(self.profile.primitive(u[0]))
            theta = np.broadcast_to(th, (bundle.n_paths, len(knots)))
            dth = np.zeros((bundle.n_paths, len(u) - 1, len(u)))
            return Clock(u, knots, np.array(theta), dth)
        m = self.link.value(bundle.xi[:, :-1, 0])                # (P, n)
        step = np.diff(u)
        theta = np.concatenate([np.zeros((bundle.n_paths, 1)), np.cumsum(m * step, 1)], 1)
        dth = np.zeros((bundle.n_paths, len(u) - 1, len(u)))
        if self.random:
            if bundle.D is None:
                raise DomainError("first_variation must be computed for a random coefficient")
            # d theta(u_k) / d dB_i = sum_{i < l < k} h'(xi_l) D[i, l] step_l
            hp = self.link.deriv(bundle.xi[:, :-1, 0])           # (P, n)
            n = len(u) - 1
            D = bundle.D[:, :n, :n, 0, 0]                         # (P, i, l)
            inc = D * (hp * step)[:, None, :]
            inc = np.triu(inc, k=1)                               # l > i only
            dth[:, :, 1:] = np.cumsum(inc, axis=2)
        return Clock(u, u, theta, dth)


@dataclass
class Clock:
    """theta(t) per path on ``knots`` and d theta(u_k)/d dB_i on noise nodes."""

    nodes: np.ndarray           # noise grid u_0..u_n
    knots: np.ndarray           # knots of the piecewise-linear clock
    theta: np.ndarray           # (P, n_knots)
    dtheta: np.ndarray          # (P, n, n+1): [p, i, k]

    def at_nodes(self, p):
        return np.interp(self.nodes, self.knots, self.theta[p])

    def at(self, p, r):
        return np.interp(r, self.knots, self.theta[p])

    def inverse(self, p, th):
        return np.interp(th, self.theta[p], self.knots)

    def dtheta_at(self, p, i, r):
        """d theta(r) / d dB_i, piecewise linear between noise nodes."""
        return np.interp(r, self.nodes, self.dtheta[p, i])


# ---------------------------------------------------------------------------
# kernel tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BankConfig:
    """Resolution of the time-change tables."""

    half_width: float = 6.0
    h: float = 0.1
    n_tau: int = 16
    n_out: int = 16
    n_u: int = 33
    u_span: float = 8.0
    sweep: SweepConfig = SweepConfig(n_levels=24)

    def refined(self, factor=2) -> "BankConfig":
        return BankConfig(self.half_width, self.h / factor, self.n_tau * factor,
                          self.n_out * factor, self.n_u, self.u_span, self.sweep.refined(factor))


class TimeChangeBank:
    """Reference-field tables for W(z, tau) = int Gamma_S(z, y, tau) phi(y) dy,
    its gradient, and local samples of Gamma_S(x_a, ., tau) around each
    evaluation point x_a."""

    def __init__(self, model: SeparableModel, noise: NoiseField, tau_max: float, x_eval,
                 cfg: BankConfig = BankConfig()):
        if model.factor.dim != 1:
            raise UnsupportedOperation("stochastic experiments are one-dimensional")
        self.model, self.noise, self.cfg = model, noise, cfg
        self.tau_max = float(tau_max)
        self.x_eval = np.atleast_1d(np.asarray(x_eval, float))
        ref = model.reference_field()
        self.fs = FundamentalSolution(ref, self.tau_max, cfg.sweep)
        grid = LevelGrid.box(np.zeros(1), cfg.half_width, cfg.h)
        self.grid = grid
        z = grid.points()[:, 0]
        self.z = z
        taus = self.tau_max * (np.arange(cfg.n_tau + 1) / cfg.n_tau) ** 2
        sw = cauchy_sweep(ref, grid, taus, [Source(0, init=noise.phi(z))],
                          SweepConfig(n_levels=cfg.n_tau, mode="resolvent", block=cfg.sweep.block),
                          gradient=True)
        dphi = -noise.N * z * (1 + z * z) ** (-noise.N / 2 - 1)
        W = np.vstack([noise.phi(z)] + [sw.out[j][:, 0] for j in range(1, len(taus))])
        GW = np.vstack([dphi] + [sw.gout[j][:, 0, 0] for j in range(1, len(taus))])
        self.taus = taus
        self.W = RectBivariateSpline(taus, z, W, kx=3, ky=3)
        self.GW = RectBivariateSpline(taus, z, GW, kx=3, ky=3)
        # outer kernel samples on the tau_out edges and cell midpoints
        n = cfg.n_out
        self.edges = self.tau_max * (np.arange(n + 1) / n) ** 2
        mids = self.tau_max * ((np.arange(n) + 0.5) / n) ** 2
        nodes = np.concatenate([self.edges[1:], mids])
        order = np.argsort(nodes)
        self.nodes = nodes[order]
        where = np.empty_like(order)
        where[order] = np.arange(len(order))
        self.edge_idx = np.concatenate([[-1], where[:n]])        # node index of edge j
        self.mid_idx = where[n:]
        u = np.linspace(-cfg.u_span, cfg.u_span, cfg.n_u)
        du = u[1] - u[0]
        na, nq = len(self.x_eval), len(self.nodes)
        self.kz = np.empty((na, nq, cfg.n_u))
        self.kw = np.empty((na, nq, cfg.n_u))
        Sx = model.factor.value(self.x_eval[:, None])[:, 0, 0]
        for a, xa in enumerate(self.x_eval):
            sw_a = self.fs.sweep(np.array([xa]), 0.0)
            for q, tau in enumerate(self.nodes):
                sig = np.sqrt(2 * Sx[a] * tau)
                pts = xa + u * sig
                g = sw_a.evaluate(pts[:, None], tau)["U"][:, 0]
                # Gamma_S(x_a, z, tau) = Gamma_S(z, x_a, tau) for the self-adjoint reference
                self.kz[a, q] = pts
                self.kw[a, q] = g * du * sig

    def W_at(self, tau, z, dtau=0):
        return self.W.ev(tau, z, dx=dtau)

    def GW_at(self, tau, z, dtau=0):
        return self.GW.ev(tau, z, dx=dtau)

    def describe(self):
        c = self.cfg
        return {"tau_max": self.tau_max, "h": c.h, "half_width": c.half_width,
                "n_tau": c.n_tau, "n_out": c.n_out, "n_u": c.n_u,
                "sweep_levels": c.sweep.n_levels}


def bank_for(model: SeparableModel, noise: NoiseField, T: float, x_eval,
             cfg: BankConfig = BankConfig()) -> TimeChangeBank:
    return TimeChangeBank(model, noise, model.m_sup * T * (1 + 1e-9), x_eval, cfg)


# ---------------------------------------------------------------------------
# estimates
# ---------------------------------------------------------------------------

@dataclass
class MildSolutionEstimate:
    """Monte Carlo mean of v(x, t) over paths with its standard error."""

    x: np.ndarray
    t: float
    value: np.ndarray
    std_error: np.ndarray
    n_paths: int
    method: str
    samples: np.ndarray = dc_field(repr=False, default=None)      # (P, n_x)
    parts: dict = dc_field(repr=False, default_factory=dict)

    @classmethod
    def from_samples(cls, x, t, samples, method, parts=None):
        samples = np.asarray(samples, float)
        P = samples.shape[0]
        se = samples.std(axis=0, ddof=1) / np.sqrt(P) if P > 1 else np.full(samples.shape[1], np.nan)
        return cls(np.asarray(x, float), float(t), samples.mean(axis=0), se, P, method, samples,
                   parts or {})

    def second_moment(self):
        s2 = self.samples ** 2
        return s2.mean(0), s2.std(0, ddof=1) / np.sqrt(self.n_paths)

    def as_dict(self):
        return {"method": self.method, "t": self.t, "x": self.x.tolist(),
                "value": self.value.tolist(), "std_error": self.std_error.tolist(),
                "n_paths": self.n_paths}


def _t_index(bundle: PathBundle, t):
    n = int(round(t / bundle.step))
    if n < 1 or n > len(bundle.times) - 1 or abs(bundle.times[n] - t) > 1e-9:
        raise DomainError(f"t={t} must be a positive node of the noise grid")
    return n


def _noise_factors(noise: NoiseField, bundle: PathBundle, n):
    return noise.link.value(bundle.xi[:, :n, 0])                  # (P, n)


def ito_adapted(bank: TimeChangeBank, bundle: PathBundle, t) -> MildSolutionEstimate:
    """sum_i F_i dB_i without the trace correction."""
    return _skorohod(bank, bundle, t, correct=False)


def skorohod_integral(bank: TimeChangeBank, bundle: PathBundle, t) -> MildSolutionEstimate:
    """Corrected Riemann sum for int_0^t int Gamma(x,t,y,s) G(y,s) dy dB_s."""
    return _skorohod(bank, bundle, t, correct=True)


def _skorohod(bank, bundle, t, correct):
    n = _t_index(bundle, t)
    clock = bank.model.clock(bundle)
    c = _noise_factors(bank.noise, bundle, n)
    x = bank.x_eval
    step = bundle.step
    vals = np.empty((bundle.n_paths, len(x)))
    corr_all = np.zeros_like(vals)
    for p in range(bundle.n_paths):
        th = clock.at_nodes(p)
        L = th[n] - th[:n]
        Wx = bank.W_at(L[:, None], x[None, :])
        dB = bundle.dB[p, :n, 0]
        vals[p] = (c[p] * dB) @ Wx
        if correct and bank.model.random:
            dW = bank.W_at(L[:, None], x[None, :], dtau=1)
            corr_all[p] = step * ((c[p] * clock.dtheta[p, :n, n]) @ dW)
    vals = vals - corr_all
    method = "skorohod_riemann" if correct else "ito_adapted"
    return MildSolutionEstimate.from_samples(x, bundle.times[n], vals, method,
                                             {"correction": corr_all})


def fractional_representation(bank: TimeChangeBank, bundle: PathBundle, t,
                              alpha: AlphaParams = AlphaParams()) -> MildSolutionEstimate:
    """v = (sin pi a / pi) int int (t-r)^{a-1} Gamma(x,t,z,r)(Y + X)(z,r) dz dr - I_3.

    For source cell i the r-integral over (s_i, t) uses cells whose images
    under the clock are the tau_out cells of the kernel tables, with exact
    beta-weight cell integrals; Y carries the Skorohod-corrected sum and X
    the Lebesgue part, both weighted by (r - s_i)^{-alpha}.
    """
    a = alpha.value
    n = _t_index(bundle, t)
    clock = bank.model.clock(bundle)
    c = _noise_factors(bank.noise, bundle, n)
    x = bank.x_eval
    step = bundle.step
    u = bundle.times
    pref = np.sin(np.pi * a) / np.pi
    edges = bank.edges
    P = bundle.n_paths
    I1 = np.zeros((P, len(x)))
    I2 = np.zeros((P, len(x)))
    I3 = np.zeros((P, len(x)))
    rnd = bank.model.random
    for p in range(P):
        th = clock.at_nodes(p)
        L = th[n] - th[:n]
        # assemble (i, cell) pairs
        rows_i, rows_q, rows_w, rows_tin, rows_r = [], [], [], [], []
        for i in range(n):
            Li = L[i]
            j = int(np.searchsorted(edges, Li, side="left")) - 1   # edges[j] < Li <= edges[j+1]
            if j < 1:
                raise DomainError("first kernel cell is wider than a noise cell; raise n_out")
            full = edges[:j + 1]
            tau_e = np.concatenate([full, [Li]])                   # decreasing r order
            q = list(bank.mid_idx[:j])
            mid_last = bank.nodes[bank.mid_idx[j]]
            q.append(bank.mid_idx[j] if mid_last < Li else bank.edge_idx[j])
            q = np.array(q)
            r_e = clock.inverse(p, th[n] - tau_e)[::-1]
            r_e[0], r_e[-1] = u[i], u[n]
            w = beta_weight_cells(r_e, u[i], u[n], a)[::-1]
            tau_q = bank.nodes[q]
            rows_i.append(np.full(len(q), i))
            rows_q.append(q)
            rows_w.append(w)
            rows_tin.append(Li - tau_q)
            rows_r.append(clock.inverse(p, th[n] - tau_q))
        ii = np.concatenate(rows_i)
        qq = np.concatenate(rows_q)
        ww = np.concatenate(rows_w)
        tin = np.maximum(np.concatenate(rows_tin), 0.0)
        rr = np.concatenate(rows_r)
        Z = bank.kz[:, qq, :]                                      # (a, pairs, u)
        K = bank.kw[:, qq, :]
        Wv = bank.W_at(np.broadcast_to(tin[None, :, None], Z.shape), Z)
        dB = bundle.dB[p, :n, 0]
        coef_y = c[p, ii] * dB[ii] * ww
        I1[p] = pref * np.einsum("apu,apu,p->a", K, Wv, coef_y)
        if rnd:
            dW = bank.W_at(np.broadcast_to(tin[None, :, None], Z.shape), Z, dtau=1)
            dth = np.array([clock.dtheta_at(p, i, r) for i, r in zip(ii, rr)])
            coef_x = step * c[p, ii] * dth * ww
            xpart = pref * np.einsum("apu,apu,p->a", K, dW, coef_x)
            I1[p] -= xpart
            I2[p] = xpart
            dWx = bank.W_at(L[:, None], x[None, :], dtau=1)
            I3[p] = step * ((c[p] * clock.dtheta[p, :n, n]) @ dWx)
    vals = I1 + I2 - I3
    return MildSolutionEstimate.from_samples(x, u[n], vals, "fractional_representation",
                                             {"I1": I1, "I2": I2, "I3": I3,
                                              "alpha": a})


def deterministic_variance(bank: TimeChangeBank, bundle: PathBundle, t):
    """Quadrature value sum_i F_i(x)^2 Delta of Var v(x, t) when a and G are
    deterministic (then v is Gaussian with mean zero)."""
    if bank.model.random or not bank.noise.deterministic:
        raise DomainError("exact variance needs deterministic coefficient and noise")
    n = _t_index(bundle, t)
    clock = bank.model.clock(bundle)
    th = clock.at_nodes(0)
    L = th[n] - th[:n]
    F = bank.noise.link.value(0.0) * bank.W_at(L[:, None], bank.x_eval[None, :])
    return np.sum(F ** 2, axis=0) * bundle.step


def variance_check(est: MildSolutionEstimate, exact_var):
    """z-score of the sample variance against the quadrature variance."""
    s = est.samples
    dev = (s - s.mean(0)) ** 2
    var = dev.mean(0) * len(s) / (len(s) - 1)
    se = dev.std(0, ddof=1) / np.sqrt(len(s))
    return var, se, np.abs(var - exact_var) / se


def agreement(a: MildSolutionEstimate, b: MildSolutionEstimate):
    """z-scores of the differences of means and of second moments."""
    se = np.sqrt(a.std_error ** 2 + b.std_error ** 2)
    z1 = np.abs(a.value - b.value) / se
    m2a, sa = a.second_moment()
    m2b, sb = b.second_moment()
    z2 = np.abs(m2a - m2b) / np.sqrt(sa ** 2 + sb ** 2)
    return {"combined_se": se, "z_mean": z1, "z_second": z2,
            "passed": bool(np.all(z1 <= 3) and np.all(z2 <= 3))}


# ---------------------------------------------------------------------------
# weak formulation
# ---------------------------------------------------------------------------

def bump(radius=1.5):
    """Smooth compactly supported test function and its derivative."""
    def f(y):
        s = np.asarray(y, float) / radius
        out = np.zeros_like(s)
        m = np.abs(s) < 1
        out[m] = np.exp(-1.0 / (1.0 - s[m] ** 2))
        return out

    def df(y):
        s = np.asarray(y, float) / radius
        out = np.zeros_like(s)
        m = np.abs(s) < 1
        out[m] = np.exp(-1.0 / (1.0 - s[m] ** 2)) * (-2 * s[m] / (1 - s[m] ** 2) ** 2) / radius
        return out

    f.radius = df.radius = radius
    return f, df


@dataclass
class WeakResidual:
    """R(t) per path and E[R^2]; ``exact`` is the isometric value when the
    residual is a Gaussian sum sum e_i dB_i."""

    samples: np.ndarray
    mean_square: float
    std_error: float
    exact: Optional[float] = None
    trace: Optional[np.ndarray] = None

    def trace_corrected(self):
        """E[(R - tr)^2] and its standard error, where tr is the product-rule
        term Delta sum_i c_i int D_i m(r) <S grad w_i(r), grad phi> dr created
        by a random a(x, r) multiplying a Skorohod integral."""
        if self.trace is None:
            return self.mean_square, self.std_error
        d = (self.samples - self.trace) ** 2
        return float(d.mean()), float(d.std(ddof=1) / np.sqrt(len(d)))

    def as_dict(self):
        out = {"mean_square": self.mean_square, "std_error": self.std_error,
               "exact": self.exact}
        if self.trace is not None:
            out["trace_corrected"] = list(self.trace_corrected())
        return out


def weak_solution_residual(bank: TimeChangeBank, bundle: PathBundle, test, t) -> WeakResidual:
    """R(t) = int v phi + int_0^t int a grad v grad phi - sum_i <G_i, phi> dB_i.

    ``test`` is a pair (phi, phi') from :func:`bump`.  Space integrals use the
    bank grid; time integrals the midpoint rule in the clock variable on
    each noise cell.
    """
    phi, dphi = test
    z = bank.z
    h = bank.cfg.h
    if phi.radius >= bank.cfg.half_width - h:
        raise DomainError("test function support exceeds the grid box")
    sel = np.abs(z) < phi.radius
    y = z[sel]
    fy, dfy = phi(y), dphi(y)
    Sy = bank.model.factor.value(y[:, None])[:, 0, 0]
    g_phi = h * np.sum(fy * bank.noise.phi(y))
    n = _t_index(bundle, t)
    clock = bank.model.clock(bundle)
    c = _noise_factors(bank.noise, bundle, n)
    step = bundle.step
    u = bundle.times
    P = bundle.n_paths
    rnd = bank.model.random
    if rnd:
        hp = bank.model.link.deriv(bundle.xi[:, :n, 0])
    R = np.empty(P)
    tr = np.zeros(P) if rnd else None
    exact = None
    det = not rnd and bank.noise.deterministic
    for p in range(P if not det else 1):
        th = clock.at_nodes(p)
        # coefficient of dB_i (A) and of Delta (B) in R
        L = th[n] - th[:n]
        A = h * (bank.W_at(L[:, None], y[None, :]) @ fy)
        B = np.zeros(n)
        if rnd:
            B = h * (bank.W_at(L[:, None], y[None, :], dtau=1) @ fy) * clock.dtheta[p, :n, n]
        for k in range(n):
            dth = th[k + 1] - th[k]
            tm = 0.5 * (th[k] + th[k + 1])
            tin = tm - th[:k + 1]
            gw = bank.GW_at(tin[:, None], y[None, :])
            flux = h * (gw @ (Sy * dfy))
            A[:k + 1] += dth * flux
            if rnd:
                # D_i m on cell k is h'(xi_k) D[i, k] for i < k
                tr[p] += step * step * hp[p, k] * np.sum(
                    c[p, :k] * bundle.D[p, :k, k, 0, 0] * flux[:k])
                um = 0.5 * (u[k] + u[k + 1])
                dgw = bank.GW_at(tin[:, None], y[None, :], dtau=1)
                dthm = np.array([clock.dtheta_at(p, i, um) for i in range(k + 1)])
                B[:k + 1] += dth * h * (dgw @ (Sy * dfy)) * dthm
        A -= g_phi
        if det:
            e = c[0] * A
            exact = float(np.sum(e ** 2) * step)
            R = bundle.dB[:, :n, 0] @ e
            break
        R[p] = np.sum(c[p] * A * bundle.dB[p, :n, 0]) - step * np.sum(c[p] * B)
    ms = R ** 2
    return WeakResidual(R, float(ms.mean()), float(ms.std(ddof=1) / np.sqrt(len(ms))), exact, tr)


def coarsen(bundle: PathBundle, spec: SdeSpec, factor=2) -> PathBundle:
    """Same Brownian paths on a grid ``factor`` times coarser."""
    P, n, dim = bundle.dB.shape
    if n % factor:
        raise DomainError("grid size must be divisible by the coarsening factor")
    dB = bundle.dB.reshape(P, n // factor, factor, dim).sum(axis=2)
    times = bundle.times[::factor]
    out = PathBundle(times, dB, euler_paths(spec, times, dB), bundle.seed)
    if bundle.D is not None:
        first_variation(out, spec)
    return out


def residual_refinement(coarse: WeakResidual, fine: WeakResidual):
    """Deterministic instance: ratio of E[R^2] between runs (>= 2 expected)."""
    a = coarse.exact if coarse.exact is not None else coarse.mean_square
    b = fine.exact if fine.exact is not None else fine.mean_square
    return a / b if b > 0 else np.inf


def residual_extrapolation(coarse: WeakResidual, fine: WeakResidual, corrected=False):
    """Random instance: first-order extrapolation E_0 = 2 E_fine - E_coarse of
    E[R^2] from paired runs on the same Brownian paths.

    Since E[R^2] >= 0, a weak solution shows as an extrapolated limit not
    significantly above zero: passed iff E_0 <= 3 SE(E_0).  A negative E_0
    means faster than first-order decay.  ``corrected`` uses R - tr.
    """
    def sq(r):
        return (r.samples - r.trace) ** 2 if corrected and r.trace is not None else r.samples ** 2

    a, b = sq(coarse), sq(fine)
    d = 2 * b - a
    e0 = float(d.mean())
    se0 = float(d.std(ddof=1) / np.sqrt(len(d)))
    return {"coarse": float(a.mean()), "fine": float(b.mean()), "limit": e0, "limit_se": se0,
            "z": e0 / se0 if se0 > 0 else (0.0 if e0 <= 0 else np.inf),
            "passed": bool(e0 <= 3 * se0)}


# ---------------------------------------------------------------------------
# small-time decay
# ---------------------------------------------------------------------------

@dataclass
class DecayFit:
    horizons: np.ndarray
    moments: np.ndarray
    slope: float
    trivial: bool

    @property
    def passed(self):
        return bool(self.trivial or self.slope > 0)

    def as_dict(self):
        return {"horizons": self.horizons.tolist(), "moments": self.moments.tolist(),
                "slope": self.slope, "trivial": self.trivial, "passed": self.passed}


def sup_moment(est: MildSolutionEstimate, kappa: float) -> float:
    """E[max_x |v(x, t)|^kappa] over the evaluation grid (a lower bound for
    the sup over all x)."""
    return float(np.mean(np.max(np.abs(est.samples), axis=1) ** kappa))


def small_time_decay(estimates: Sequence[MildSolutionEstimate], kappa: float) -> DecayFit:
    """Log-log slope of the sampled sup-moment against the horizon."""
    h = np.array([e.t for e in estimates])
    m = np.array([sup_moment(e, kappa) for e in estimates])
    if np.all(m == 0):
        return DecayFit(h, m, 0.0, True)
    slope = float(np.polyfit(np.log(h), np.log(m), 1)[0])
    return DecayFit(h, m, slope, False)


# ---------------------------------------------------------------------------
# deterministic operators
# ---------------------------------------------------------------------------

def volume_potential(fs: FundamentalSolution, f: Callable, x, t, n_time=12, grid=None):
    """V(x, t) = int_0^t int Gamma(x,t,y,s) f(y,s) dy ds and grad V.

    Gauss-Legendre nodes in s carry one Cauchy column each; the gradient
    uses the interchanged derivative int int grad_x Gamma f.
    """
    if not t > 0:
        raise DomainError("t must be positive")
    d = fs.field.dim
    X = _as_points(x, d)
    g, w = np.polynomial.legendre.leggauss(n_time)
    s = 0.5 * t * (g + 1)
    w = 0.5 * t * w
    grid = grid or cauchy_box(fs.field, np.mean(X, axis=0), 0.0, t)
    pts = grid.points()
    sources = [Source(j, init=np.asarray(f(pts, sj), float)) for j, sj in enumerate(s)]
    cfg = SweepConfig(n_levels=n_time, mode="resolvent", block=fs.cfg.block)
    sw = cauchy_sweep(fs.field, grid, s, sources, cfg, gradient=True, outputs=False)
    res = sw.evaluate(X, t)
    return res["U"] @ w, np.einsum("nic,c->ni", res["V"], w)


def u_integrand(fs: FundamentalSolution, noise: NoiseField, x, t, s, xi_s):
    """u(x, t, s) = int Gamma(x,t,y,s) G(y,s) dy for one path value xi_s."""
    return propagate(fs, lambda z: noise.G(z[:, 0], xi_s), x, t, s)


def initial_condition_term(fs: FundamentalSolution, iota: Callable, x, t, tol=1e-6):
    """int Gamma(x, t, y, 0) iota(y) dy, rejecting data that grows too fast for
    the Gaussian tail on the truncation box."""
    X = _as_points(x, fs.field.dim)
    grid = cauchy_box(fs.field, np.mean(X, axis=0), 0.0, t)
    pts = grid.points()
    vals = np.abs(np.asarray(iota(pts), float))
    C = decay_from_lambda(fs.field.lam)
    edge = np.zeros(len(pts), bool)
    for i in range(grid.dim):
        ax = pts[:, i]
        edge |= (ax <= ax.min() + 1e-12) | (ax >= ax.max() - 1e-12)
    r2 = np.min(np.sum((pts[edge][:, None, :] - X[None, :, :]) ** 2, -1), axis=1)
    tail = vals[edge] * t ** (-grid.dim / 2) * np.exp(-C * r2 / t)
    ref = 1.0 + np.max(np.abs(np.asarray(iota(X), float)))
    if not np.all(np.isfinite(tail)) or np.max(tail) > tol * ref:
        raise DomainError("initial condition grows too fast for the truncation box")
    return propagate(fs, iota, X, t, 0.0, grid=grid)


def interpolation_identity(fs: FundamentalSolution, x, t, y, s, alpha: float, n_nodes=3):
    """(sin pi a / pi) int_s^t (t-r)^{a-1}(r-s)^{-a} int Gamma(x,t,z,r) Gamma(z,r,y,s) dz dr.

    Gauss-Jacobi nodes in r; each inner z-integral is a Cauchy solve from r
    with data Gamma(., r, y, s).  Returns (value, Gamma(x, t, y, s)).
    """
    r, w = jacobi_rule(s, t, alpha, n_nodes)
    yv = np.atleast_1d(np.asarray(y, float))
    X = _as_points(x, fs.field.dim)
    total = np.zeros(len(X))
    for rk, wk in zip(r, w):
        grid = cauchy_box(fs.field, yv, s, t, resolve=np.sqrt(2 * (rk - s) / fs.field.lam))
        total += wk * propagate(fs, lambda z: fs.gamma(z, rk, yv, s), X, t, rk, grid=grid)
    # the weight is homogeneous of degree -1 in (t - s), so no rescaling
    val = np.sin(np.pi * alpha) / np.pi * total
    return val, fs.gamma(X, t, yv, s)
