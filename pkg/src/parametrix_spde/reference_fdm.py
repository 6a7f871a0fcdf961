"""Finite-difference oracle for the fundamental solution.

Implicit Euler in time and a conservative flux form in space,

    (u_i^{n+1} - u_i^n) / tau = h^{-2} [a_{i+1/2}(u_{i+1} - u_i) - a_{i-1/2}(u_i - u_{i-1})],

with face coefficients given by the harmonic mean of the node values and
homogeneous Dirichlet data on the truncated box.  Time steps are split at
the coefficient breakpoints so that each step sees a constant coefficient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_banded
from scipy.sparse import diags, identity, kron
from scipy.sparse.linalg import splu

from .coeff_fields import CoefficientField
from .errors import DomainError, NumericalError, UnsupportedOperation


@dataclass(frozen=True)
class FdmConfig:
    h: float = 0.01
    tau: float = 2e-4
    L: Optional[float] = None          # box half-width; default 8 sqrt(lambda T)
    center: float = 0.0
    sigma0_factor: float = 2.0         # Dirac mollification width in units of h

    @property
    def sigma0(self):
        return self.sigma0_factor * self.h

    def half_width(self, lam, T):
        return self.L if self.L is not None else 8.0 * np.sqrt(lam * T)

    def refined(self, factor=2):
        return FdmConfig(self.h / factor, self.tau / factor, self.L, self.center,
                         self.sigma0_factor)


def fdm_axis(cfg: FdmConfig, lam, T):
    L = cfg.half_width(lam, T)
    n = int(round(2 * L / cfg.h)) + 1
    return cfg.center - L + cfg.h * np.arange(n)


def _step_times(s, t, tau, breaks, save):
    """Step boundaries from s to t of size <= tau, split at breaks and saves."""
    marks = np.unique(np.concatenate([[s, t], [b for b in breaks if s < b < t],
                                      [v for v in save if s < v < t]]))
    out = [s]
    for a, b in zip(marks[:-1], marks[1:]):
        n = max(1, int(np.ceil((b - a) / tau - 1e-9)))
        out.extend(a + (b - a) * np.arange(1, n + 1) / n)
    return np.array(out)


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def solve(field: CoefficientField, init, s: float, t: float, cfg: FdmConfig,
          save_times: Sequence[float] = (), axes=None):
    """Advance ``init`` (values on the FDM grid) from s to t.

    Returns the final grid function and a dict of snapshots at ``save_times``.
    """
    if not s < t:
        raise DomainError(f"need s < t, got s={s}, t={t}")
    d = field.dim
    if axes is None:
        axes = [fdm_axis(cfg, field.lam, t - s)] * d
    u = np.asarray(init, dtype=float).copy()
    steps = _step_times(s, t, cfg.tau, field.breakpoints, save_times)
    saves = {float(v): None for v in save_times}
    h = cfg.h
    if d == 1:
        x = axes[0][:, None]
        cache = {}
        for a, b in zip(steps[:-1], steps[1:]):
            dt = b - a
            am = field(x, 0.5 * (a + b))[:, 0, 0]
            key = (am.tobytes(), dt)
            if key not in cache:
                cache.clear()
                face = _harmonic(am[:-1], am[1:])
                r = dt / h ** 2
                ab = np.zeros((3, len(am)))
                ab[0, 1:] = -r * face
                ab[2, :-1] = -r * face
                ab[1] = 1.0
                ab[1, :-1] += r * face
                ab[1, 1:] += r * face
                # Dirichlet: faces to the ghost nodes use the node value
                ab[1, 0] += r * am[0]
                ab[1, -1] += r * am[-1]
                cache[key] = ab
            u = solve_banded((1, 1), cache[key], u)
            if not np.all(np.isfinite(u)):
                raise NumericalError("non-finite FDM solution", residual=np.inf)
            for v in saves:
                if abs(b - v) < 1e-12:
                    saves[v] = u.copy()
        return u, saves
    if d == 2:
        X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], -1)
        nx, ny = X.shape
        shape = u.shape
        u = u.ravel()
        lu, key_old = None, None
        for a, b in zip(steps[:-1], steps[1:]):
            dt = b - a
            A = field(pts, 0.5 * (a + b))
            if np.any(A[:, 0, 1] != 0) or np.any(A[:, 1, 0] != 0):
                raise UnsupportedOperation("2-d oracle supports diagonal coefficients only")
            key = (A.tobytes(), dt)
            if key != key_old:
                lu = splu(_operator_2d(A[:, 0, 0].reshape(nx, ny), A[:, 1, 1].reshape(nx, ny),
                                       h, dt).tocsc())
                key_old = key
            u = lu.solve(u)
            for v in saves:
                if abs(b - v) < 1e-12:
                    saves[v] = u.reshape(shape).copy()
        return u.reshape(shape), saves
    raise UnsupportedOperation("oracle supports d in {1, 2}")


def _operator_2d(a11, a22, h, dt):
    """I - dt * div(a grad) on an (nx, ny) grid with Dirichlet ghosts."""
    nx, ny = a11.shape
    n = nx * ny
    idx = np.arange(n).reshape(nx, ny)
    rows, cols, vals = [], [], []
    diag = np.ones(n)
    r = dt / h ** 2
    for axis, coef in ((0, a11), (1, a22)):
        fwd = _harmonic(np.take(coef, range(0, coef.shape[axis] - 1), axis),
                        np.take(coef, range(1, coef.shape[axis]), axis))
        i0 = np.take(idx, range(0, idx.shape[axis] - 1), axis).ravel()
        i1 = np.take(idx, range(1, idx.shape[axis]), axis).ravel()
        f = r * fwd.ravel()
        rows += [i0, i1]
        cols += [i1, i0]
        vals += [-f, -f]
        np.add.at(diag, i0, f)
        np.add.at(diag, i1, f)
        # ghost faces on both ends
        first = np.take(idx, [0], axis).ravel()
        last = np.take(idx, [idx.shape[axis] - 1], axis).ravel()
        np.add.at(diag, first, r * np.take(coef, [0], axis).ravel())
        np.add.at(diag, last, r * np.take(coef, [coef.shape[axis] - 1], axis).ravel())
    from scipy.sparse import coo_matrix
    off = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                     shape=(n, n))
    return off + diags(diag)


def mollified_dirac(axes, y, sigma0):
    """Normalised Gaussian of width sigma0 at y, renormalised on the grid."""
    mesh = np.meshgrid(*axes, indexing="ij")
    r2 = sum((m - yi) ** 2 for m, yi in zip(mesh, np.atleast_1d(y)))
    g = np.exp(-0.5 * r2 / sigma0 ** 2)
    h = np.prod([ax[1] - ax[0] for ax in axes])
    return g / (g.sum() * h)


@dataclass
class OracleResult:
    values: np.ndarray        # (n_times, n_x)
    error_estimate: np.ndarray
    mass: np.ndarray


def _oracle_once(field, xs, ts, y, s, cfg):
    T = max(ts) - s
    d = field.dim
    axes = [fdm_axis(FdmConfig(cfg.h, cfg.tau, cfg.L, c, cfg.sigma0_factor), field.lam, T)
            for c in np.atleast_1d(y)] if d > 1 else \
        [fdm_axis(FdmConfig(cfg.h, cfg.tau, cfg.L, float(np.ravel(y)[0]), cfg.sigma0_factor),
                  field.lam, T)]
    init = mollified_dirac(axes, y, cfg.sigma0)
    _, snaps = solve(field, init, s, max(ts), cfg, save_times=list(ts), axes=axes)
    snaps[float(max(ts))] = _
    cell = np.prod([ax[1] - ax[0] for ax in axes])
    vals, mass = [], []
    for t in ts:
        u = snaps[float(t)]
        mass.append(u.sum() * cell)
        if d == 1:
            vals.append(np.interp(np.ravel(xs), axes[0], u))
        else:
            from scipy.interpolate import RegularGridInterpolator
            vals.append(RegularGridInterpolator(axes, u)(np.asarray(xs).reshape(-1, d)))
    return np.array(vals), np.array(mass)


def gamma_oracle(field: CoefficientField, x, t, y, s, cfg: FdmConfig = FdmConfig(),
                 richardson=True) -> OracleResult:
    """FDM approximation of Gamma(x, t, y, s) at points x and times t
    (scalars or sequences), with a refined-run error estimate."""
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if np.min(ts) - s < 10 * cfg.tau:
        raise DomainError("t - s must be at least 10 time steps for the mollified source")
    vals, mass = _oracle_once(field, x, ts, y, s, cfg)
    if richardson:
        fine, _ = _oracle_once(field, x, ts, y, s, cfg.refined())
        err = np.abs(fine - vals)
    else:
        err = np.full_like(vals, np.nan)
    return OracleResult(vals, err, mass)
