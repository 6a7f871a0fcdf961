"""Coefficient matrices a(x, t) of divergence-form parabolic operators.

Every field is a finite sum of separable terms

    a(x, t) = sum_p S_p(x) * m_p(t),

with matrix-valued spatial factors ``S_p`` taken from a small catalog (each
carrying an analytic gradient) and scalar time profiles ``m_p``.  Time
profiles may be discontinuous; piecewise-constant profiles are integrated
exactly by summing over breakpoints, smooth ones by adaptive quadrature.
Diffusion-driven fields a(x, xi_t) are realized path by path as
piecewise-constant profiles on the simulation grid.

Norm conventions: the Lipschitz bound K_a is the sup over entries (i, j)
of the Euclidean norm of grad_x a_ij, so |a(x,t) - a(x',t)| <= K_a |x - x'|
entrywise; ellipticity uses the spectral sandwich of the symmetric part.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import integrate as spi

from .errors import DomainError, NumericalError, UnsupportedOperation

KINDS = ("constant", "piecewise", "smooth", "diffusion")


# ---------------------------------------------------------------------------
# spatial factors
# ---------------------------------------------------------------------------

class SpatialFactor:
    """Matrix-valued function of x with an analytic gradient.

    ``value(x)`` maps ``(..., d)`` to ``(..., d, d)``; ``grad(x)`` maps to
    ``(..., d, d, d)`` with the derivative direction last.
    """

    dim: int = 1
    sup_value: float = 1.0
    sup_grad: float = 0.0
    differentiable: bool = True

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def divergence(self, x):
        """gamma_i = sum_j d S_ji / d x_j."""
        g = self.grad(x)
        return np.einsum("...jij->...i", g)

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantMatrix(SpatialFactor):
    matrix: tuple

    @classmethod
    def of(cls, m) -> "ConstantMatrix":
        m = np.atleast_2d(np.asarray(m, dtype=float))
        return cls(tuple(map(tuple, m)))

    @property
    def dim(self):
        return len(self.matrix)

    @property
    def sup_value(self):
        return float(np.max(np.abs(self.matrix)))

    sup_grad = 0.0

    def value(self, x):
        x = np.asarray(x, dtype=float)
        m = np.asarray(self.matrix)
        return np.broadcast_to(m, x.shape[:-1] + m.shape).copy()

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        d = self.dim
        return np.zeros(x.shape[:-1] + (d, d, d))

    def describe(self):
        return {"factor": "constant", "matrix": [list(r) for r in self.matrix]}


@dataclass(frozen=True)
class TanhDiagonal(SpatialFactor):
    """I + kappa * diag(tanh(x_1), ..., tanh(x_d))."""

    kappa: float
    dim: int = 1

    @property
    def sup_value(self):
        return 1.0 + abs(self.kappa)

    @property
    def sup_grad(self):
        return abs(self.kappa)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.dim, self.dim))
        idx = np.arange(self.dim)
        out[..., idx, idx] = 1.0 + self.kappa * np.tanh(x)
        return out

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        d = self.dim
        out = np.zeros(x.shape[:-1] + (d, d, d))
        idx = np.arange(d)
        out[..., idx, idx, idx] = self.kappa / np.cosh(x) ** 2
        return out

    def describe(self):
        return {"factor": "tanh", "kappa": self.kappa, "dim": self.dim}


@dataclass(frozen=True)
class Wave(SpatialFactor):
    """(1 + kappa sin(x_1+...+x_d)) I plus, for d >= 2, an off-diagonal
    coupling (kappa/4) cos(x_1) in the (1, 2) entries."""

    kappa: float
    dim: int = 1

    @property
    def sup_value(self):
        return 1.0 + abs(self.kappa)

    @property
    def sup_grad(self):
        return abs(self.kappa) * np.sqrt(self.dim)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        d = self.dim
        s = x.sum(axis=-1)
        out = np.zeros(x.shape[:-1] + (d, d))
        idx = np.arange(d)
        out[..., idx, idx] = (1.0 + self.kappa * np.sin(s))[..., None]
        if d >= 2:
            c = 0.25 * self.kappa * np.cos(x[..., 0])
            out[..., 0, 1] = c
            out[..., 1, 0] = c
        return out

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        d = self.dim
        s = x.sum(axis=-1)
        out = np.zeros(x.shape[:-1] + (d, d, d))
        idx = np.arange(d)
        out[..., idx, idx, :] = (self.kappa * np.cos(s))[..., None, None]
        if d >= 2:
            g = -0.25 * self.kappa * np.sin(x[..., 0])
            out[..., 0, 1, 0] = g
            out[..., 1, 0, 0] = g
        return out

    def describe(self):
        return {"factor": "wave", "kappa": self.kappa, "dim": self.dim}


@dataclass(frozen=True)
class LinearDiagonal(SpatialFactor):
    """diag(1 + c_i x_i).  Not globally elliptic; used for local checks."""

    coefs: tuple

    @property
    def dim(self):
        return len(self.coefs)

    @property
    def sup_grad(self):
        return float(np.max(np.abs(self.coefs)))

    sup_value = np.inf

    def value(self, x):
        x = np.asarray(x, dtype=float)
        d = self.dim
        out = np.zeros(x.shape[:-1] + (d, d))
        idx = np.arange(d)
        out[..., idx, idx] = 1.0 + np.asarray(self.coefs) * x
        return out

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        d = self.dim
        out = np.zeros(x.shape[:-1] + (d, d, d))
        idx = np.arange(d)
        out[..., idx, idx, idx] = np.asarray(self.coefs)
        return out

    def describe(self):
        return {"factor": "linear", "coefs": list(self.coefs)}


@dataclass(frozen=True)
class Frozen(SpatialFactor):
    """A factor without a usable x-derivative (for error-path tests)."""

    base: SpatialFactor
    differentiable: bool = False

    @property
    def dim(self):
        return self.base.dim

    def value(self, x):
        return self.base.value(x)

    def grad(self, x):
        raise UnsupportedOperation("this coefficient kind carries no spatial derivative")

    def describe(self):
        return {"factor": "frozen", "base": self.base.describe()}


# ---------------------------------------------------------------------------
# time profiles
# ---------------------------------------------------------------------------

class TimeProfile:
    """Scalar function of time with an exact or adaptive primitive."""

    kind = "constant"


    def value(self, t):
        raise NotImplementedError

    def primitive(self, t):
        """Return int_0^t m(u) du (vectorised in t)."""
        raise NotImplementedError

    def integral(self, s, t):
        return self.primitive(t) - self.primitive(s)

    @property
    def sup(self) -> float:
        raise NotImplementedError

    @property
    def inf(self) -> float:
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantProfile(TimeProfile):
    c: float = 1.0
    kind = "constant"

    def value(self, t):
        return np.full(np.shape(t), self.c, dtype=float) if np.ndim(t) else float(self.c)

    def primitive(self, t):
        return self.c * np.asarray(t, dtype=float)

    @property
    def sup(self):
        return abs(self.c)

    @property
    def inf(self):
        return self.c

    def describe(self):
        return {"profile": "constant", "c": self.c}


@dataclass(frozen=True)
class PiecewiseProfile(TimeProfile):
    """Right-continuous step function; extended by its end values outside
    [t_0, t_n]."""

    breakpoints: tuple
    values: tuple
    kind = "piecewise"

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp.ndim != 1 or len(bp) != len(self.values) + 1:
            raise DomainError("need len(breakpoints) == len(values) + 1")
        if np.any(np.diff(bp) <= 0):
            raise DomainError("breakpoints must be strictly increasing")
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "_bp", bp)
        object.__setattr__(self, "_vals", vals)
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(np.diff(bp) * vals)]))
        object.__setattr__(self, "_zero", 0.0)
        object.__setattr__(self, "_zero", float(self._from_start(0.0)))

    @classmethod
    def from_arrays(cls, breakpoints, values):
        return cls(tuple(float(b) for b in breakpoints), tuple(float(v) for v in values))

    def value(self, t):
        idx = np.searchsorted(self._bp, t, side="right") - 1
        idx = np.clip(idx, 0, len(self._vals) - 1)
        return self._vals[idx]

    def _from_start(self, t):
        # integral from t_0, extended linearly by the end values
        t = np.asarray(t, dtype=float)
        bp, cum, v = self._bp, self._cum, self._vals
        out = np.interp(t, bp, cum)
        out = np.where(t > bp[-1], cum[-1] + v[-1] * (t - bp[-1]), out)
        return np.where(t < bp[0], v[0] * (t - bp[0]), out)

    def primitive(self, t):
        return self._from_start(t) - self._zero

    @property
    def sup(self):
        return float(np.max(np.abs(self._vals)))

    @property
    def inf(self):
        return float(np.min(self._vals))

    def describe(self):
        return {"profile": "piecewise", "breakpoints": list(self.breakpoints),
                "values": list(self.values)}


@dataclass(frozen=True)
class SineProfile(TimeProfile):
    """base + amp * sin(freq * t), integrated by adaptive quadrature."""

    base: float = 1.0
    amp: float = 0.5
    freq: float = 1.0
    epsabs: float = 1e-14
    kind = "smooth"

    def value(self, t):
        return self.base + self.amp * np.sin(self.freq * np.asarray(t, dtype=float))

    def _scalar_primitive(self, t: float) -> float:
        return _quad_primitive(self.base, self.amp, self.freq, float(t), self.epsabs)

    def primitive(self, t):
        t = np.asarray(t, dtype=float)
        flat = t.ravel()
        uniq, inv = np.unique(flat, return_inverse=True)
        vals = np.array([self._scalar_primitive(u) for u in uniq])
        return vals[inv].reshape(t.shape)

    @property
    def sup(self):
        return abs(self.base) + abs(self.amp)

    @property
    def inf(self):
        return self.base - abs(self.amp)

    def describe(self):
        return {"profile": "sine", "base": self.base, "amp": self.amp, "freq": self.freq}


@lru_cache(maxsize=65536)
def _quad_primitive(base, amp, freq, t, epsabs):
    val, err = spi.quad(lambda u: base + amp * np.sin(freq * u), 0.0, t,
                        epsabs=epsabs, epsrel=1e-13, limit=200)
    if err > 1e3 * epsabs + 1e-12 * abs(val):
        raise NumericalError(f"quadrature did not converge on [0, {t}]", residual=err)
    return val


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrozenIntegral:
    """Symmetric part of int_s^t a(z, u) du for a frozen point z."""

    z: np.ndarray
    s: float
    t: float
    matrix: np.ndarray


@dataclass(frozen=True)
class CoefficientField:
    terms: tuple  # ((SpatialFactor, TimeProfile), ...)
    lam: float
    kind: str = "constant"
    label: str = ""

    @property
    def dim(self) -> int:
        return self.terms[0][0].dim

    @property
    def lipschitz(self) -> float:
        return float(sum(S.sup_grad * m.sup for S, m in self.terms))

    @property
    def x_independent(self) -> bool:
        return all(isinstance(S, ConstantMatrix) for S, _ in self.terms)

    @property
    def breakpoints(self) -> np.ndarray:
        bps = [np.asarray(m.breakpoints) for _, m in self.terms if getattr(m, "breakpoints", ())]
        return np.unique(np.concatenate(bps)) if bps else np.array([])

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        out = 0.0
        for S, m in self.terms:
            out = out + S.value(x) * np.asarray(m.value(t))[..., None, None]
        return out

    def integrate(self, z, s, t):
        """Symmetric part of int_s^t a(z, u) du, vectorised over z (and
        broadcastable s, t)."""
        z = np.asarray(z, dtype=float)
        out = 0.0
        for S, m in self.terms:
            w = np.asarray(m.integral(s, t))
            out = out + S.value(z) * w[..., None, None]
        return 0.5 * (out + np.swapaxes(out, -1, -2))

    def gradient_x(self, x, t):
        x = np.asarray(x, dtype=float)
        out = 0.0
        for S, m in self.terms:
            if not S.differentiable:
                raise UnsupportedOperation("coefficient factor is not differentiable in x")
            out = out + S.grad(x) * np.asarray(m.value(t))[..., None, None, None]
        return out

    def divergence_gamma(self, x, t):
        g = self.gradient_x(x, t)
        return np.einsum("...jij->...i", g)

    def with_profiles(self, profiles: Sequence[TimeProfile], lam=np.inf, kind=None):
        """Same spatial factors, new time profiles (tangent directions)."""
        return CoefficientField(tuple((S, p) for (S, _), p in zip(self.terms, profiles)),
                                lam=lam, kind=kind or self.kind, label=self.label + "'")

    def describe(self) -> dict:
        return {"kind": self.kind, "lambda": self.lam, "K_a": self.lipschitz,
                "terms": [{"space": S.describe(), "time": m.describe()} for S, m in self.terms]}


def integrate_in_time(field: CoefficientField, z, s: float, t: float) -> FrozenIntegral:
    if not s < t:
        raise DomainError(f"need s < t, got s={s}, t={t}")
    A = field.integrate(np.asarray(z, dtype=float), s, t)
    ev = np.linalg.eigvalsh(A)
    if np.any(ev <= 0):
        raise DomainError("time integral is not positive definite")
    return FrozenIntegral(np.asarray(z, dtype=float), float(s), float(t), A)


def gradient_x(field: CoefficientField, x, t):
    return field.gradient_x(x, t)


def divergence_gamma(field: CoefficientField, x, t):
    return field.divergence_gamma(x, t)


# ---------------------------------------------------------------------------
# constructors for the shipped families
# ---------------------------------------------------------------------------

def constant_field(matrix=None, dim=1, lam=None, c=1.0) -> CoefficientField:
    m = np.eye(dim) * c if matrix is None else np.atleast_2d(np.asarray(matrix, float))
    ev = np.linalg.eigvalsh(0.5 * (m + m.T))
    lam = lam if lam is not None else float(max(ev.max(), 1.0 / ev.min()))
    return CoefficientField(((ConstantMatrix.of(m), ConstantProfile(1.0)),), lam=lam,
                            kind="constant", label="constant")


def random_breakpoints(n_pieces: int, T: float, lo: float, hi: float, seed: int):
    """Uniform breakpoints on [0, T] with values drawn uniformly in [lo, hi]."""
    rng = np.random.default_rng(seed)
    bp = np.linspace(0.0, T, n_pieces + 1)
    vals = rng.uniform(lo, hi, size=n_pieces)
    return PiecewiseProfile.from_arrays(bp, vals)


def piecewise_field(profile: TimeProfile, factor: SpatialFactor, lam: float,
                    label="piecewise") -> CoefficientField:
    return CoefficientField(((factor, profile),), lam=lam, kind=profile.kind, label=label)


def piecewise_matrix_field(breakpoints, matrices, lam=None) -> CoefficientField:
    """x-independent field equal to ``matrices[k]`` on [t_k, t_{k+1})."""
    mats = np.asarray(matrices, dtype=float)
    d = mats.shape[-1]
    terms = []
    for i in range(d):
        for j in range(d):
            vals = mats[:, i, j]
            if np.all(vals == 0):
                continue
            E = np.zeros((d, d))
            E[i, j] = 1.0
            terms.append((ConstantMatrix.of(E), PiecewiseProfile.from_arrays(breakpoints, vals)))
    if lam is None:
        sym = 0.5 * (mats + np.swapaxes(mats, -1, -2))
        ev = np.linalg.eigvalsh(sym)
        lam = float(max(ev.max(), 1.0 / ev.min()))
    return CoefficientField(tuple(terms), lam=lam, kind="piecewise", label="piecewise-matrix")


# ---------------------------------------------------------------------------
# property checks
# ---------------------------------------------------------------------------

def sample_points(rng, n, dim, box=6.0):
    return rng.uniform(-box, box, size=(n, dim))


def check_ellipticity(field: CoefficientField, n=10_000, T=1.0, box=6.0, seed=0):
    """Sample (x, t, zeta) and return (ok, min ratio, max ratio) of
    <a zeta, zeta> / |zeta|^2 against [1/lambda, lambda]."""
    rng = np.random.default_rng(seed)
    x = sample_points(rng, n, field.dim, box)
    t = rng.uniform(0.0, T, size=n)
    zeta = rng.normal(size=(n, field.dim))
    a = field(x, t) if field.kind == "constant" else sum(
        S.value(x) * np.asarray(m.value(t))[:, None, None] for S, m in field.terms)
    q = np.einsum("ni,nij,nj->n", zeta, a, zeta) / np.einsum("ni,ni->n", zeta, zeta)
    lo, hi = float(q.min()), float(q.max())
    return (lo >= 1.0 / field.lam - 1e-14 and hi <= field.lam + 1e-14), lo, hi


def check_lipschitz(field: CoefficientField, n=10_000, T=1.0, box=6.0, seed=1):
    """Entrywise-sup Lipschitz ratio |a(x,t)-a(x',t)| / |x-x'| on samples."""
    rng = np.random.default_rng(seed)
    x = sample_points(rng, n, field.dim, box)
    xp = x + rng.normal(scale=0.5, size=x.shape)
    t = rng.uniform(0.0, T, size=n)
    a1 = sum(S.value(x) * np.asarray(m.value(t))[:, None, None] for S, m in field.terms)
    a2 = sum(S.value(xp) * np.asarray(m.value(t))[:, None, None] for S, m in field.terms)
    ratio = np.max(np.abs(a1 - a2), axis=(-1, -2)) / np.linalg.norm(x - xp, axis=-1)
    r = float(ratio.max())
    return r <= field.lipschitz * (1 + 1e-12) + 1e-15, r


# ---------------------------------------------------------------------------
# diffusion-driven coefficients  a(x, t) = sum_p S_p(x) h_p(xi_t)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Link:
    """Scalar link h(y) = base + amp * f(y) with f in {sin, tanh}."""

    name: str = "sin"
    base: float = 1.0
    amp: float = 0.0

    def value(self, y):
        return self.base + self.amp * _LINKS[self.name][0](np.asarray(y, float))

    def deriv(self, y):
        return self.amp * _LINKS[self.name][1](np.asarray(y, float))

    @property
    def sup(self):
        return abs(self.base) + abs(self.amp)

    @property
    def inf(self):
        return self.base - abs(self.amp)

    def describe(self):
        return {"link": self.name, "base": self.base, "amp": self.amp}


_LINKS = {
    "sin": (np.sin, np.cos),
    "tanh": (np.tanh, lambda y: 1.0 / np.cosh(y) ** 2),
    "const": (lambda y: np.zeros_like(y), lambda y: np.zeros_like(y)),
}


@dataclass(frozen=True)
class DiffusionCoefficient:
    """a(x, y) = sum_p S_p(x) h_p(y) driven by a scalar diffusion y = xi_t."""

    factors: tuple
    links: tuple
    lam: float
    label: str = "diffusion"

    @property
    def dim(self):
        return self.factors[0].dim

    @property
    def lipschitz(self):
        """Bound on |grad_x a|, |grad_y a| and |d2 a / dx dy| (conditions a2, a3)."""
        gx = sum(S.sup_grad * h.sup for S, h in zip(self.factors, self.links))
        gy = sum(S.sup_value * abs(h.amp) for S, h in zip(self.factors, self.links))
        gxy = sum(S.sup_grad * abs(h.amp) for S, h in zip(self.factors, self.links))
        return float(max(gx, gy, gxy))

    def a(self, x, y):
        x = np.asarray(x, float)
        return sum(S.value(x) * np.asarray(h.value(y))[..., None, None]
                   for S, h in zip(self.factors, self.links))

    def grad_y(self, x, y):
        x = np.asarray(x, float)
        return sum(S.value(x) * np.asarray(h.deriv(y))[..., None, None]
                   for S, h in zip(self.factors, self.links))

    def realize(self, times, xi) -> CoefficientField:
        """Field for one path; constant on [u_l, u_{l+1}) with value a(x, xi_l)."""
        times = np.asarray(times, float)
        xi = np.asarray(xi, float)
        profiles = [PiecewiseProfile.from_arrays(times, h.value(xi[:-1])) for h in self.links]
        return CoefficientField(tuple(zip(self.factors, profiles)), lam=self.lam,
                                kind="diffusion", label=self.label)

    def tangent(self, times, xi, dxi) -> CoefficientField:
        """Direction field D a for a path perturbation dxi (per grid node)."""
        times = np.asarray(times, float)
        profiles = [PiecewiseProfile.from_arrays(times, h.deriv(xi[:-1]) * np.asarray(dxi)[:-1])
                    for h in self.links]
        return CoefficientField(tuple(zip(self.factors, profiles)), lam=np.inf,
                                kind="diffusion", label=self.label + "'")

    def describe(self):
        return {"kind": "diffusion", "lambda": self.lam, "K_a": self.lipschitz,
                "terms": [{"space": S.describe(), "link": h.describe()}
                          for S, h in zip(self.factors, self.links)]}
