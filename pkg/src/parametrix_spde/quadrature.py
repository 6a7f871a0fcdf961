"""Time quadratures for endpoint-singular integrands.

Three rules are provided:

* ``sin2_rule``: r = s + (t - s) sin^2(theta) with midpoint theta nodes; the
  Jacobian dr = 2 sqrt((t - r)(r - s)) dtheta cancels both inverse square
  root singularities, so int_s^t dr / sqrt((t-r)(r-s)) = pi is reproduced
  exactly.
* ``jacobi_rule``: Gauss-Jacobi nodes for the weight (t-r)^{a-1}(r-s)^{-a}.
* ``level_weights``: product integration on a fixed set of interior nodes
  against a (piecewise smooth) density, with linear interpolation between
  nodes and linear extrapolation to the two endpoints.
"""
from __future__ import annotations

import numpy as np
from scipy.special import betainc, betaincc, roots_jacobi

from .errors import DomainError


def _jacobi(n, a, b):
    # a + b = -1 triggers a harmless 0/0 in scipy's recurrence setup
    with np.errstate(divide="ignore", invalid="ignore"):
        return roots_jacobi(n, a, b)


def sin2_rule(s: float, t: float, n: int):
    """Return nodes r_k and weights w_k with sum w_k f(r_k) ~ int_s^t f(r) dr.

    The weights equal 2 sqrt((t-r)(r-s)) * (pi / 2n), so an integrand with
    inverse square root singularities at both ends is integrated by the
    midpoint rule in theta.
    """
    if not s < t:
        raise DomainError(f"need s < t, got s={s}, t={t}")
    theta = (np.arange(n) + 0.5) * (0.5 * np.pi / n)
    r = s + (t - s) * np.sin(theta) ** 2
    w = (t - s) * np.sin(2 * theta) * (0.5 * np.pi / n)
    return r, w


def jacobi_rule(s: float, t: float, alpha: float, n: int):
    """Nodes and weights for int_s^t (t-r)^{alpha-1} (r-s)^{-alpha} f(r) dr."""
    if not s < t:
        raise DomainError(f"need s < t, got s={s}, t={t}")
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")
    x, w = _jacobi(n, alpha - 1.0, -alpha)
    r = s + 0.5 * (t - s) * (1.0 + x)
    return r, w


def beta_weight_cells(edges, s: float, t: float, alpha: float, n_gauss: int = 24):
    """Exact-to-quadrature integrals of (t-r)^{alpha-1}(r-s)^{-alpha} over
    consecutive cells [edges[k], edges[k+1]] contained in [s, t].

    Cells touching an endpoint use Gauss-Jacobi nodes.  Interior cells use
    Gauss-Legendre nodes when they are at least one width away from both
    endpoints and the regularized incomplete beta function otherwise, so
    the cell weights sum to pi / sin(pi alpha) up to rounding.
    """
    edges = np.asarray(edges, dtype=float)
    a, b = edges[:-1], edges[1:]
    h = 0.5 * (b - a)
    out = np.empty(len(a))
    left = a <= s
    right = b >= t
    both = left & right
    mid = ~(left | right)
    out[both] = np.pi / np.sin(np.pi * alpha)
    xl, wl = _rule("legendre", n_gauss, alpha)
    far = mid & (np.minimum(a - s, t - b) >= b - a)
    if far.any():
        r = (a + h)[far, None] + h[far, None] * xl[None, :]
        out[far] = h[far] * np.sum(wl * (t - r) ** (alpha - 1) * (r - s) ** (-alpha), axis=1)
    near = mid & ~far
    if near.any():
        out[near] = _beta_cdf_diff((a[near] - s) / (t - s), (b[near] - s) / (t - s), alpha)
    m = left & ~both
    if m.any():
        # (r-s)^{-alpha} singular at the left end
        x, w = _rule("left", n_gauss, alpha)
        r = a[m, None] + h[m, None] * (1 + x[None, :])
        out[m] = np.sum(w * (t - r) ** (alpha - 1), axis=1) * h[m] ** (1 - alpha)
    m = right & ~both
    if m.any():
        x, w = _rule("right", n_gauss, alpha)
        r = a[m, None] + h[m, None] * (1 + x[None, :])
        out[m] = np.sum(w * (r - s) ** (-alpha), axis=1) * h[m] ** alpha
    return out


def _beta_cdf_diff(ua, ub, alpha):
    """B(1-alpha, alpha) (I_ub - I_ua), with the complement used in the upper
    half to avoid cancellation next to t."""
    p, q = 1.0 - alpha, alpha
    upper = ua >= 0.5
    d = np.where(upper, betaincc(p, q, ua) - betaincc(p, q, ub),
                 betainc(p, q, ub) - betainc(p, q, ua))
    return np.pi / np.sin(np.pi * alpha) * d


_RULES = {}


def _rule(kind, n, alpha):
    key = (kind, n, alpha if kind != "legendre" else None)
    if key not in _RULES:
        if kind == "legendre":
            _RULES[key] = np.polynomial.legendre.leggauss(n)
        elif kind == "left":
            _RULES[key] = _jacobi(n, 0.0, -alpha)
        else:
            _RULES[key] = _jacobi(n, alpha - 1.0, 0.0)
    return _RULES[key]


def _interp_matrix(nodes, x):
    """Matrix L with (L f)(x) = piecewise-linear interpolant of f(nodes) at x,
    extrapolated linearly beyond the first and last node."""
    nodes = np.asarray(nodes, dtype=float)
    x = np.asarray(x, dtype=float)
    n = len(nodes)
    L = np.zeros((len(x), n))
    if n == 0:
        return L
    if n == 1:
        L[:, 0] = 1.0
        return L
    i = np.clip(np.searchsorted(nodes, x) - 1, 0, n - 2)
    u = (x - nodes[i]) / (nodes[i + 1] - nodes[i])
    rows = np.arange(len(x))
    L[rows, i] = 1.0 - u
    L[rows, i + 1] = u
    return L


def level_weights(nodes, upper, density, breaks=(), n_gauss=3):
    """Weights w with sum_k w_k J(nodes_k) ~ int_0^upper J(rho) mu(rho) drho.

    ``J`` is replaced by its piecewise-linear interpolant through the
    interior ``nodes`` (linear extrapolation to 0 and ``upper``, constant for
    a single node, zero for none).  ``density`` is a vectorised callable for
    mu; ``breaks`` are its discontinuities, at which the integral is split so
    that piecewise-constant densities are integrated exactly.
    """
    nodes = np.asarray(nodes, dtype=float)
    if len(nodes) == 0:
        return np.zeros(0)
    br = np.asarray(breaks, dtype=float)
    br = br[(br > 0) & (br < upper)]
    cuts = np.unique(np.concatenate([[0.0, upper], nodes, br]))
    xg, wg = np.polynomial.legendre.leggauss(n_gauss)
    a, b = cuts[:-1], cuts[1:]
    h = 0.5 * (b - a)
    pts = (a + h)[:, None] + h[:, None] * xg[None, :]
    wts = h[:, None] * wg[None, :]
    # evaluate the density strictly inside each segment so right-continuous
    # steps pick the value of the segment
    mu = density(pts.ravel()).reshape(pts.shape)
    L = _interp_matrix(nodes, pts.ravel())
    return (wts * mu).ravel() @ L
