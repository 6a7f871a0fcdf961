"""Frozen-coefficient parametrix Z and Gaussian envelopes.

For a symmetric positive definite A = int_s^t a(z, u) du the parametrix is
the Gaussian density with covariance 2A,

    Z(w) = (4 pi)^{-d/2} det(A)^{-1/2} exp(-<A^{-1} w, w> / 4).

Spatial derivatives use the Hermite-type recurrences obtained from
v = grad log Z = -A^{-1} w / 2 and Q = hess log Z = -A^{-1} / 2.  Because Z
solves dZ/dA_ij = d_i d_j Z, derivatives with respect to A (and therefore
Malliavin derivatives of coefficient functionals) reduce to contractions
with higher spatial derivatives.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError

EPS_FIT = 0.01


@dataclass(frozen=True)
class GaussianEnvelope:
    """g_{c,C}(x, t) = c t^{-d/2} exp(-C |x|^2 / t)."""

    c: float
    C: float
    dim: int = 1

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        return self.c * t ** (-self.dim / 2) * np.exp(-self.C * r2 / t)

    def as_dict(self):
        return {"c": float(self.c), "C": float(self.C), "dim": self.dim}


@dataclass
class ParametrixValue:
    value: np.ndarray
    gradient: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None
    third: Optional[np.ndarray] = None
    fourth: Optional[np.ndarray] = None


def _inverse_and_det(A):
    A = np.asarray(A, dtype=float)
    d = A.shape[-1]
    if d == 1:
        det = A[..., 0, 0]
    elif d == 2:
        det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    else:
        det = np.linalg.det(A)
    if np.any(~(det > 0)):
        raise DomainError("frozen integral A must be positive definite")
    if d == 1:
        inv = 1.0 / A
    elif d == 2:
        a, b, c, e = A[..., 0, 0], A[..., 0, 1], A[..., 1, 0], A[..., 1, 1]
        inv = np.stack([np.stack([e, -b], -1), np.stack([-c, a], -1)], -2) / det[..., None, None]
    else:
        inv = np.linalg.inv(A)
    return inv, det


def gaussian_derivatives(A, w, order=0):
    """Return [Z, dZ, d2Z, ...] up to ``order`` (<= 4), batched.

    ``A`` has shape (..., d, d) and ``w`` shape (..., d); the k-th entry has
    shape (...,) + (d,) * k.
    """
    A = np.asarray(A, dtype=float)
    w = np.asarray(w, dtype=float)
    d = w.shape[-1]
    P, det = _inverse_and_det(A)
    Pw = np.einsum("...ij,...j->...i", P, w)
    Z = (4 * np.pi) ** (-d / 2) * det ** -0.5 * np.exp(-0.25 * np.einsum("...i,...i->...", Pw, w))
    out = [Z]
    if order == 0:
        return out
    v = -0.5 * Pw
    Q = -0.5 * P
    if d == 1:
        # scalar recurrences, cheaper than einsum
        vv, q = v[..., 0], Q[..., 0, 0]
        ds = [vv, vv * vv + q, vv ** 3 + 3 * q * vv, vv ** 4 + 6 * q * vv * vv + 3 * q * q]
        for k in range(1, order + 1):
            out.append((Z * ds[k - 1]).reshape(Z.shape + (1,) * k))
        return out
    out.append(Z[..., None] * v)
    if order >= 2:
        vv = v[..., :, None] * v[..., None, :]
        out.append(Z[..., None, None] * (vv + Q))
    if order >= 3:
        v3 = vv[..., None] * v[..., None, None, :]
        Qv = Q[..., :, :, None] * v[..., None, None, :]
        sym = Qv + np.swapaxes(Qv, -1, -2) + np.moveaxis(Qv, -1, -3)
        out.append(Z[..., None, None, None] * (v3 + sym))
    if order >= 4:
        v4 = v3[..., None] * v[..., None, None, None, :]
        Qvv = Q[..., :, :, None, None] * vv[..., None, None, :, :]
        # sum over the 6 ways of choosing the Q pair among (i, j, k, l)
        perms = ["ijkl", "ikjl", "iljk", "jkil", "jlik", "klij"]
        s6 = sum(np.einsum("..." + p + "->...ijkl", Qvv) for p in perms)
        QQ = Q[..., :, :, None, None] * Q[..., None, None, :, :]
        s3 = sum(np.einsum("..." + p + "->...ijkl", QQ) for p in ["ijkl", "ikjl", "iljk"])
        out.append(Z[..., None, None, None, None] * (v4 + s6 + s3))
    return out


def eval_Z(A, w, order=0) -> ParametrixValue:
    """Parametrix value and spatial derivatives up to ``order``.

    ``A`` may be a :class:`FrozenIntegral` or a raw matrix.
    """
    A = getattr(A, "matrix", A)
    ders = gaussian_derivatives(A, w, order)
    ders += [None] * (5 - len(ders))
    return ParametrixValue(*ders)


def contract_A(dA, der):
    """sum_ij dA_ij der[..., i, j, ...]: directional derivative of a
    Gaussian-derivative tensor with respect to A."""
    dA = np.asarray(dA, dtype=float)
    extra = der.ndim - dA.ndim
    return np.einsum("...ij,...ij" + "abcd"[:extra] + "->..." + "abcd"[:extra],
                     dA, der) if extra >= 0 else None


def malliavin_Z(A, DA, w):
    """Trace[DA_j . hess Z] for each Brownian component j.

    ``DA`` has shape (m, d, d) (one matrix per component) or (d, d).
    """
    A = getattr(A, "matrix", A)
    H = gaussian_derivatives(A, w, 2)[2]
    DA = np.asarray(DA, dtype=float)
    if DA.ndim == 2:
        return np.einsum("ij,...ij->...", DA, H)
    return np.einsum("mij,...ij->...m", DA, H)


def malliavin_grad_Z(A, DA, w):
    """sum_ij DA_ij d_i d_j d_k Z (gradient of the trace formula)."""
    A = getattr(A, "matrix", A)
    T3 = gaussian_derivatives(A, w, 3)[3]
    return np.einsum("ij,...ijk->...k", np.asarray(DA, float), T3)


# ---------------------------------------------------------------------------
# envelopes
# ---------------------------------------------------------------------------

def decay_from_lambda(lam, eps_fit=EPS_FIT):
    """Decay rate fixed from the ellipticity constant before fitting."""
    return 1.0 / (4.0 * lam * (1.0 + eps_fit))


def tensor_norm(values, order):
    """Euclidean (Frobenius) norm over the trailing ``order`` axes."""
    v = np.abs(np.asarray(values, dtype=float))
    if order == 0:
        return v
    axes = tuple(range(-order, 0))
    return np.sqrt(np.sum(v * v, axis=axes))


def fit_amplitude(norms, w, tau, dim, time_power, decay):
    """Smallest c with tau^{time_power} |value| <= g_{c,decay}(w, tau) on the
    samples.  ``norms`` are the pointwise magnitudes."""
    norms = np.asarray(norms, dtype=float)
    tau = np.asarray(tau, dtype=float)
    r2 = np.sum(np.asarray(w, float) ** 2, axis=-1)
    ratio = norms * tau ** (time_power + dim / 2.0) * np.exp(decay * r2 / tau)
    return float(np.max(ratio))


@dataclass
class EnvelopeFit:
    envelope: GaussianEnvelope
    refined: Optional[GaussianEnvelope]
    ratio: float
    stable: bool
    tolerance: float

    @property
    def passed(self):
        return bool(np.isfinite(self.envelope.c) and self.stable)

    def as_dict(self):
        return {"c": self.envelope.c, "C": self.envelope.C,
                "c_refined": None if self.refined is None else self.refined.c,
                "refinement_ratio": self.ratio, "stable": self.stable,
                "tolerance": self.tolerance, "passed": self.passed}


def scaled_sample_grid(dim, n, span):
    """Uniform grid of scaled displacements u = w / sqrt(tau) in [-span, span]^d."""
    u = np.linspace(-span, span, n)
    mesh = np.meshgrid(*([u] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def envelope_check_Z(field, order, pairs, n_w=41, span=None, z=None,
                     eps_fit=EPS_FIT, tol=1.05) -> EnvelopeFit:
    """Fit the amplitude of (t-s)^{k/2} |d^k Z| at a decay fixed from lambda.

    ``pairs`` is a sequence of (s, t).  The fit is repeated on a grid with
    twice the density of scaled displacements and twice the time pairs
    (midpoints added); the check passes when both fits are finite and their
    ratio is below ``tol``.
    """
    lam = field.lam
    d = field.dim
    C = decay_from_lambda(lam, eps_fit)
    span = span if span is not None else 6.0 * np.sqrt(lam)
    z = np.zeros(d) if z is None else np.asarray(z, float)
    pairs = [tuple(p) for p in pairs]

    def fit(npts, prs):
        u = scaled_sample_grid(d, npts, span)
        best = 0.0
        for s, t in prs:
            tau = t - s
            A = field.integrate(z, s, t)
            w = u * np.sqrt(tau)
            der = gaussian_derivatives(np.broadcast_to(A, (len(w), d, d)), w, order)[order]
            best = max(best, fit_amplitude(tensor_norm(der, order), w, tau, d, order / 2, C))
        return best

    c1 = fit(n_w, pairs)
    dense_pairs = list(pairs)
    for (s0, t0), (s1, t1) in zip(pairs[:-1], pairs[1:]):
        dense_pairs.append((0.5 * (s0 + s1), 0.5 * (t0 + t1)))
    c2 = fit(2 * n_w - 1, dense_pairs)
    ratio = max(c1, c2) / min(c1, c2) if min(c1, c2) > 0 else np.inf
    return EnvelopeFit(GaussianEnvelope(c1, C, d), GaussianEnvelope(c2, C, d), ratio,
                       bool(np.isfinite(ratio) and ratio < tol), tol)
