"""Singular kernel K, iterated kernels K_m and the series Phi.

The kernel is

    K(x, t, y, s) = sum_ij (a_ij(x,t) - a_ij(y,t)) d_ij Z + sum_i gamma_i(x,t) d_i Z,

with Z frozen at y.  For a field a = sum_p S_p(x) m_p(t) it splits as
K = sum_p m_p(t) kappa_p, where kappa_p depends on time only through the
frozen integral A and is therefore continuous in (t, r).  Iterates are
computed by a single upward sweep over time levels:

    K^p_m(x, t_j) = sum_q int dM_q(r) int kappa_p(x, t_j, z, r) K^q_{m-1}(z, r) dz,

where the time integral is a product integration against the (possibly
discontinuous) measure dM_q = m_q(r) dr on the levels below t_j.  The
spatial integral is a trapezoid sum on the level grid when the kernel is
wide compared with the grid, and otherwise uses kernel-adapted local nodes
with Lagrange interpolation of the level data.

Tangents with respect to the time profiles (used for Malliavin derivatives)
are propagated through the same sweep.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field, asdict
from typing import Callable, Optional, Sequence

import numpy as np

from .coeff_fields import CoefficientField
from .errors import DomainError, NumericalError
from .parametrix import gaussian_derivatives
from .quadrature import level_weights, sin2_rule


# ---------------------------------------------------------------------------
# pointwise kernel and brute-force convolution
# ---------------------------------------------------------------------------

def _as_points(x, d):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, d) if x.ndim <= 1 else x


def eval_K(field: CoefficientField, x, t, y, s):
    """Kernel K(x, t, y, s), vectorised over x and y (broadcast)."""
    if not s < t:
        raise DomainError(f"need s < t, got s={s}, t={t}")
    d = field.dim
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 0 or (d > 1 and x.ndim == 1):
        x = x.reshape(d)
    if y.ndim == 0 or (d > 1 and y.ndim == 1):
        y = y.reshape(d)
    x, y = np.broadcast_arrays(np.atleast_1d(x), np.atleast_1d(y))
    A = field.integrate(y, s, t)
    _, D1, D2 = gaussian_derivatives(A, x - y, 2)
    da = field(x, t) - field(y, t)
    gam = field.divergence_gamma(x, t)
    out = np.einsum("...ij,...ij->...", da, D2) + np.einsum("...i,...i->...", gam, D1)
    return out


def _bridge_nodes(x, t, y, s, r, lam, spacing_factor=3.0, window=12.0, cap=4000):
    """1-d spatial nodes covering the mass of z -> k(x,t,z,r) h(z,r,y,s)."""
    u = (r - s) / (t - s)
    ks = np.array([lam ** -2, lam ** 2])
    wts = ks * u / ((1 - u) + ks * u)
    means = y + wts * (x - y)
    var = 2.0 * (t - r) * (r - s) / (t - s)
    up, lo = np.sqrt(lam * var), np.sqrt(var / lam)
    a, b = means.min() - window * up, means.max() + window * up
    h = lo / spacing_factor
    n = int(min(cap, np.ceil((b - a) / h))) + 1
    z = np.linspace(a, b, n)
    return z, (b - a) / (n - 1)


def convolve(outer: Callable, inner: Callable, x, t, y, s, n_theta=64, lam=1.0,
             box=None, n_space=801, spacing_factor=3.0, window=12.0):
    """int_s^t int outer(x,t,z,r) inner(z,r,y,s) dz dr (d = 1).

    Time nodes come from the sin^2 rule, which absorbs inverse square root
    singularities at both ends.  Spatial nodes follow the Gaussian bridge
    between (y, s) and (x, t) unless a bounded ``box`` is given.  Kernels are
    called as ``k(x, t, z, r)`` with ``z`` an array of shape (n, 1).
    """
    if not s < t:
        raise DomainError(f"need s < t, got s={s}, t={t}")
    x = float(np.ravel(x)[0])
    y = float(np.ravel(y)[0])
    rs, ws = sin2_rule(s, t, n_theta)
    total = 0.0
    for r, w in zip(rs, ws):
        if box is not None:
            z = np.linspace(box[0], box[1], n_space)
            h = (box[1] - box[0]) / (n_space - 1)
            zw = np.full(n_space, h)
            zw[[0, -1]] *= 0.5
        else:
            z, h = _bridge_nodes(x, t, y, s, r, lam, spacing_factor, window)
            zw = np.full(len(z), h)
        zz = z[:, None]
        vals = np.asarray(outer(np.array([x]), t, zz, r)) * np.asarray(inner(zz, r, np.array([y]), s))
        total += w * np.sum(zw * np.ravel(vals))
    return float(total)


# ---------------------------------------------------------------------------
# level grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevelGrid:
    """Uniform tensor grid ``origin + spacing * index``."""

    origin: tuple
    spacing: tuple
    shape: tuple

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def max_spacing(self) -> float:
        return float(np.max(self.spacing))

    def axis(self, i):
        return self.origin[i] + self.spacing[i] * np.arange(self.shape[i])

    def points(self) -> np.ndarray:
        axes = [self.axis(i) for i in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @classmethod
    def box(cls, center, half_width, step):
        center = np.atleast_1d(np.asarray(center, dtype=float))
        n = int(np.ceil(2 * half_width / step)) + 1
        h = 2 * half_width / (n - 1)
        return cls(tuple(center - half_width), (h,) * len(center), (n,) * len(center))

    def as_dict(self):
        return {"origin": list(self.origin), "spacing": list(self.spacing),
                "shape": list(self.shape)}


@dataclass(frozen=True)
class PointSource:
    """A unit point mass at ``point`` (the level of a Dirac source)."""

    point: tuple

    @property
    def dim(self):
        return len(self.point)

    @property
    def size(self):
        return 1

    @property
    def cell(self):
        return 1.0

    def points(self):
        return np.asarray(self.point, dtype=float)[None, :]

    def as_dict(self):
        return {"point": list(self.point)}


# ---------------------------------------------------------------------------
# kernel values on pairs of points
# ---------------------------------------------------------------------------

_ORDERS = {"K": 2, "KA": 4, "Z": 0, "ZA": 2, "G": 1, "GA": 3}


def pair_kernels(field: CoefficientField, xs, zs, t, r, want):
    """Kernel components on the pairs (xs[n], zs[n]) for times r < t.

    Components (P = number of field terms):
    ``K`` (P, n) kappa_p; ``KA`` (P, P, n) derivative of kappa_p along the
    frozen-integral direction S_q(z); ``Z`` (n,); ``ZA`` (P, n); ``G`` (d, n)
    spatial gradient of Z; ``GA`` (P, d, n).
    """
    order = max(_ORDERS[w] for w in want)
    A = field.integrate(zs, r, t)
    ders = gaussian_derivatives(A, xs - zs, order)
    out = {}
    Sz = [0.5 * (S.value(zs) + np.swapaxes(S.value(zs), -1, -2)) for S, _ in field.terms]
    if "K" in want or "KA" in want:
        dS = [S.value(xs) - S.value(zs) for S, _ in field.terms]
        div = [S.divergence(xs) if S.differentiable else np.zeros_like(xs)
               for S, _ in field.terms]
    if "K" in want:
        out["K"] = np.stack([np.einsum("nij,nij->n", dS[p], ders[2])
                             + np.einsum("ni,ni->n", div[p], ders[1])
                             for p in range(len(dS))])
    if "KA" in want:
        out["KA"] = np.stack([np.stack([
            np.einsum("nij,nkl,nijkl->n", dS[p], Sz[q], ders[4])
            + np.einsum("ni,nkl,nikl->n", div[p], Sz[q], ders[3])
            for q in range(len(Sz))]) for p in range(len(dS))])
    if "Z" in want:
        out["Z"] = ders[0]
    if "ZA" in want:
        out["ZA"] = np.stack([np.einsum("nkl,nkl->n", Sq, ders[2]) for Sq in Sz])
    if "G" in want:
        out["G"] = np.moveaxis(ders[1], -1, 0)
    if "GA" in want:
        out["GA"] = np.stack([np.moveaxis(np.einsum("nkl,nikl->ni", Sq, ders[3]), -1, 0)
                              for Sq in Sz])
    return out


def _lagrange_1d(xi, origin, h, n, p):
    """Indices (m, p) and weights for p-point Lagrange interpolation."""
    u = (xi - origin) / h
    i0 = np.floor(u).astype(int) - (p // 2 - 1)
    loc = u - i0
    idx = i0[:, None] + np.arange(p)[None, :]
    w = np.ones((len(xi), p))
    for q in range(p):
        for m in range(p):
            if m != q:
                w[:, q] *= (loc - m) / (q - m)
    valid = (idx >= 0) & (idx < n)
    return np.clip(idx, 0, n - 1), np.where(valid, w, 0.0)


@dataclass(frozen=True)
class BlockConfig:
    direct_factor: float = 2.0   # trapezoid if grid spacing <= sigma_lo / direct_factor
    local_density: float = 3.0   # local node spacing = sigma_lo / local_density
    local_window: float = 7.0    # local half-width in units of sigma_hi
    lagrange: int = 6
    chunk: int = 400_000


def build_blocks(field: CoefficientField, targets, t, source, r, want,
                 cfg: BlockConfig = BlockConfig()):
    """Matrices B[c] of shape (..., n_targets, n_source) such that
    ``B @ f`` approximates int kernel_c(x, t, z, r) f(z) dz for data ``f``
    on the source level."""
    if not r < t:
        raise DomainError("source level must lie below the target time")
    lam = field.lam
    d = field.dim
    X = _as_points(targets, d)
    nt = len(X)
    tau = t - r
    s_lo = np.sqrt(2 * tau / lam)
    s_hi = np.sqrt(2 * lam * tau)
    if isinstance(source, PointSource) or source.max_spacing <= s_lo / cfg.direct_factor:
        Zs = source.points()
        ns = len(Zs)
        res = None
        step = max(1, cfg.chunk // max(ns, 1))
        parts = []
        for a in range(0, nt, step):
            xs = np.repeat(X[a:a + step], ns, axis=0)
            zs = np.tile(Zs, (len(X[a:a + step]), 1))
            vals = pair_kernels(field, xs, zs, t, r, want)
            parts.append({k: v.reshape(v.shape[:-1] + (-1, ns)) for k, v in vals.items()})
        res = {k: np.concatenate([p[k] for p in parts], axis=-2) * source.cell for k in parts[0]}
        return res
    # local nodes around each target
    h_loc = s_lo / cfg.local_density
    n_half = int(np.ceil(cfg.local_window * s_hi / h_loc))
    off1 = h_loc * np.arange(-n_half, n_half + 1)
    offs = np.stack([m.ravel() for m in np.meshgrid(*([off1] * d), indexing="ij")], -1)
    no = len(offs)
    wloc = h_loc ** d
    ns = source.size
    p = cfg.lagrange
    stencil = np.stack([m.ravel() for m in np.meshgrid(*([np.arange(p)] * d), indexing="ij")], -1)
    strides = np.array([int(np.prod(source.shape[i + 1:])) for i in range(d)])
    step = max(1, cfg.chunk // no)
    out = {}
    for a in range(0, nt, step):
        Xc = X[a:a + step]
        m = len(Xc)
        zs = (Xc[:, None, :] + offs[None, :, :]).reshape(-1, d)
        xs = np.repeat(Xc, no, axis=0)
        vals = pair_kernels(field, xs, zs, t, r, want)
        # tensor Lagrange weights
        idx_d, w_d = [], []
        for i in range(d):
            ii, ww = _lagrange_1d(zs[:, i], source.origin[i], source.spacing[i], source.shape[i], p)
            idx_d.append(ii)
            w_d.append(ww)
        flat = np.zeros((len(zs), len(stencil)), dtype=np.int64)
        lw = np.ones((len(zs), len(stencil)))
        for i in range(d):
            flat += idx_d[i][:, stencil[:, i]] * strides[i]
            lw *= w_d[i][:, stencil[:, i]]
        rows = np.repeat(np.arange(m), no * len(stencil))
        lin = rows * ns + flat.ravel()
        for k, v in vals.items():
            lead = v.shape[:-1]
            v2 = v.reshape(-1, len(zs))
            blk = np.empty((v2.shape[0], m, ns))
            for c in range(v2.shape[0]):
                contrib = (v2[c][:, None] * lw).ravel() * wloc
                blk[c] = np.bincount(lin, weights=contrib, minlength=m * ns).reshape(m, ns)
            out.setdefault(k, []).append(blk.reshape(lead + (m, ns)))
    return {k: np.concatenate(v, axis=-2) for k, v in out.items()}


# ---------------------------------------------------------------------------
# sweep engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    """Resolution of the iterated-kernel sweep."""

    n_levels: int = 32
    eta_step: Optional[float] = None      # scaled spacing of Dirac-source levels
    eta_width: Optional[float] = None     # scaled half-width of Dirac-source levels
    m_max: int = 20
    tail_tol: float = 1e-8
    mode: str = "series"                  # "series" (K_m columns) or "resolvent"
    block: BlockConfig = BlockConfig()

    def eta(self, lam):
        step = self.eta_step if self.eta_step is not None else 0.3 * np.sqrt(2.0 / lam)
        width = self.eta_width if self.eta_width is not None else 10.0 * np.sqrt(lam)
        return step, width

    def refined(self, factor=2):
        step = self.eta_step
        return SweepConfig(n_levels=self.n_levels * factor,
                           eta_step=None if step is None else step / factor,
                           eta_width=self.eta_width, m_max=self.m_max,
                           tail_tol=self.tail_tol, mode=self.mode, block=self.block)


@dataclass
class Source:
    """Column of the sweep: a Cauchy datum on level ``start`` (or a point mass)."""

    start: int
    init: Optional[np.ndarray] = None
    init_fn: Optional[Callable] = None
    label: str = ""


def _profile_breaks(profile):
    return np.asarray(getattr(profile, "breakpoints", ()), dtype=float)


class Sweep:
    """Upward sweep over time levels computing K_m (or Phi), the assembled
    output int Gamma f (or Gamma itself for a point source) and tangents.

    Parameters
    ----------
    field : CoefficientField
    times : increasing level times; level 0 is the start of the sources.
    grids : one LevelGrid (or PointSource for level 0) per level.
    sources : list of Source columns.
    power : 2 when level-0 data is a point mass (integrands blow up like
        (r - s)^{-1/2}), 1 for bounded Cauchy data.
    directions : tangent directions, each a tuple of time profiles (one per
        field term) giving the perturbation of m_p.
    pairs : tangent columns as (source index, direction index).
    """

    def __init__(self, field: CoefficientField, times, grids, sources: Sequence[Source],
                 cfg: SweepConfig = SweepConfig(), power=2, directions=(), pairs=(),
                 outputs=False, gradient=False):
        self.field = field
        self.times = np.asarray(times, dtype=float)
        self.grids = list(grids)
        self.sources = list(sources)
        self.cfg = cfg
        self.power = power
        self.directions = [tuple(dv) for dv in directions]
        self.pairs = [tuple(pq) for pq in pairs]
        self.outputs = outputs
        self.gradient = gradient
        self.P = len(field.terms)
        self.M = cfg.m_max if cfg.mode == "series" else 1
        self.state = [None] * len(self.times)   # K columns (N, P, M, C)
        self.dstate = [None] * len(self.times)  # tangent columns (N, P, M, T)
        self.out = [None] * len(self.times)
        self.dout = [None] * len(self.times)
        self.gout = [None] * len(self.times)
        self.dgout = [None] * len(self.times)
        self._wcache = {}

    # -- time weights -----------------------------------------------------
    def _weights(self, c, t, kmax, profile):
        """Weights over levels start(c)+1 .. kmax-1 for int F(r) m(r) dr on
        (times[start], t), with F ~ (r - start)^{-(power-1)/2}."""
        st = self.sources[c].start
        key = (st, float(t), kmax, id(profile))
        if key in self._wcache:
            return self._wcache[key]
        s0 = self.times[st]
        nodes_r = self.times[st + 1:kmax]
        p = self.power
        rho = (nodes_r - s0) ** (1.0 / p)
        up = (t - s0) ** (1.0 / p)
        br = _profile_breaks(profile)
        br = (br[br > s0] - s0) ** (1.0 / p)
        # r = s0 + rho^p, dr = p rho^(p-1) drho; the rho^(p-1) factor is
        # applied to the node values so that the interpolant stays smooth
        dens = lambda q: p * np.asarray(profile.value(s0 + q ** p), dtype=float)
        w = level_weights(rho, up, dens, breaks=br) * rho ** (p - 1)
        self._wcache[key] = w
        return w

    def _dir_coef(self, t, r):
        """(E, P) array of delta M_p(t) - delta M_p(r)."""
        if not self.directions:
            return np.zeros((0, self.P))
        return np.array([[float(prof.integral(r, t)) for prof in dv] for dv in self.directions])

    # -- one target pass --------------------------------------------------
    def _pass(self, X, t, kmax, need_state=True, need_out=True):
        """Evaluate new K columns and outputs at points X, time t, using
        levels 0 .. kmax-1."""
        f = self.field
        P, M = self.P, self.M
        C = len(self.sources)
        T = len(self.pairs)
        nt = len(X)
        want = set()
        tang = T > 0
        if need_state:
            want |= {"K"} | ({"KA"} if tang else set())
        if need_out:
            want |= {"Z"} | ({"ZA"} if tang else set())
            if self.gradient:
                want |= {"G"} | ({"GA"} if tang else set())
        d = f.dim
        K1 = np.zeros((nt, P, C))
        conv = np.zeros((nt, P, M, C))
        dK1 = np.zeros((nt, P, T))
        dconv = np.zeros((nt, P, M, T))
        U = np.zeros((nt, C))
        dU = np.zeros((nt, T))
        V = np.zeros((nt, d, C))
        dV = np.zeros((nt, d, T))
        profiles = [m for _, m in f.terms]
        pair_src = np.array([c for c, _ in self.pairs], dtype=int)
        pair_dir = np.array([e for _, e in self.pairs], dtype=int)
        live = [c for c in range(C) if self.sources[c].start < kmax]
        if not live:
            return None
        # time weights per source and per term (and per tangent direction)
        W = {}
        Wd = {}
        for c in live:
            for q in range(P):
                W[c, q] = self._weights(c, t, kmax, profiles[q])
        for tau_i, (c, e) in enumerate(self.pairs):
            if c in live:
                for q in range(P):
                    Wd[tau_i, q] = self._weights(c, t, kmax, self.directions[e][q])
        for k in range(kmax):
            users = [c for c in live if self.sources[c].start <= k]
            if not users:
                continue
            B = build_blocks(f, X, t, self.grids[k], self.times[k], want, self.cfg.block)
            coef = self._dir_coef(t, self.times[k])  # (E, P)
            for c in users:
                st = self.sources[c].start
                tps = [i for i in range(T) if pair_src[i] == c]
                if k == st:
                    init = self.sources[c].init
                    if need_state:
                        K1[:, :, c] = np.einsum("pnm,m->np", B["K"], init)
                        for i in tps:
                            e = pair_dir[i]
                            dK1[:, :, i] = np.einsum("q,pqnm,m->np", coef[e], B["KA"], init)
                    if need_out:
                        U[:, c] += B["Z"] @ init
                        if self.gradient:
                            V[:, :, c] += np.einsum("inm,m->ni", B["G"], init)
                        for i in tps:
                            e = pair_dir[i]
                            dU[:, i] += np.einsum("q,qnm,m->n", coef[e], B["ZA"], init)
                            if self.gradient:
                                dV[:, :, i] += np.einsum("q,qinm,m->ni", coef[e], B["GA"], init)
                    continue
                j = k - st - 1
                Sk = self.state[k][:, :, :, c]              # (N, Q, M)
                wq = np.array([W[c, q][j] for q in range(P)])
                if need_state:
                    F = np.einsum("pnm,mqk->npqk", B["K"], Sk)  # (nt, P, Q, M)
                    conv[:, :, :, c] += np.einsum("npqk,q->npk", F, wq)
                Phi_k = Sk.sum(axis=2)                      # (N, Q)
                if need_out:
                    ZPhi = B["Z"] @ Phi_k                    # (nt, Q)
                    U[:, c] += ZPhi @ wq
                    if self.gradient:
                        GPhi = np.einsum("inm,mq->niq", B["G"], Phi_k)
                        V[:, :, c] += GPhi @ wq
                for i in tps:
                    e = pair_dir[i]
                    wdq = np.array([Wd[i, q][j] for q in range(P)])
                    dSk = self.dstate[k][:, :, :, i]        # (N, Q, M)
                    dPhi_k = dSk.sum(axis=2)
                    if need_state:
                        KA = np.einsum("r,prnm->pnm", coef[e], B["KA"])
                        dconv[:, :, :, i] += (np.einsum("npqk,q->npk", F, wdq)
                                              + np.einsum("pnm,mqk,q->npk", KA, Sk, wq)
                                              + np.einsum("pnm,mqk,q->npk", B["K"], dSk, wq))
                    if need_out:
                        ZA = np.einsum("r,rnm->nm", coef[e], B["ZA"])
                        dU[:, i] += ZPhi @ wdq + (ZA @ Phi_k) @ wq + (B["Z"] @ dPhi_k) @ wq
                        if self.gradient:
                            GA = np.einsum("r,rinm->inm", coef[e], B["GA"])
                            dV[:, :, i] += (GPhi @ wdq + np.einsum("inm,mq->niq", GA, Phi_k) @ wq
                                            + np.einsum("inm,mq->niq", B["G"], dPhi_k) @ wq)
        res = {}
        if need_state:
            if self.cfg.mode == "series":
                S = np.concatenate([K1[:, :, None, :], conv[:, :, :-1, :]], axis=2)
                dS = np.concatenate([dK1[:, :, None, :], dconv[:, :, :-1, :]], axis=2)
            else:
                S = K1[:, :, None, :] + conv
                dS = dK1[:, :, None, :] + dconv
            res["state"], res["dstate"] = S, dS
        if need_out:
            res.update(U=U, dU=dU, V=V, dV=dV)
        return res

    def run(self):
        n = len(self.times)
        for c, src in enumerate(self.sources):
            if src.start == 0 and src.init is None and src.init_fn is not None:
                src.init = np.asarray(src.init_fn(self, 0), dtype=float)
        for j in range(1, n):
            X = self.grids[j].points()
            res = self._pass(X, self.times[j], j, need_state=True, need_out=self.outputs)
            C = len(self.sources)
            if res is None:
                self.state[j] = np.zeros((len(X), self.P, self.M, C))
                self.dstate[j] = np.zeros((len(X), self.P, self.M, len(self.pairs)))
            else:
                self.state[j], self.dstate[j] = res["state"], res["dstate"]
                if self.outputs:
                    self.out[j], self.dout[j] = res["U"], res["dU"]
                    self.gout[j], self.dgout[j] = res["V"], res["dV"]
            for c, src in enumerate(self.sources):
                if src.start == j and src.init is None:
                    src.init = np.asarray(src.init_fn(self, j), dtype=float)
        return self

    def evaluate(self, X, t, need_state=False):
        """Outputs (and optionally K columns) at arbitrary points and time."""
        kmax = int(np.searchsorted(self.times, t - 1e-14 * max(1.0, abs(t)), side="left"))
        if kmax < 1:
            raise DomainError("evaluation time must exceed the source time")
        X = _as_points(X, self.field.dim)
        res = self._pass(X, t, kmax, need_state=need_state, need_out=True)
        if res is None:
            raise DomainError("no source is active below the evaluation time")
        return res

    # -- combined values --------------------------------------------------
    def combined_state(self, j, m_slice=slice(None)):
        """K (summed over the selected orders) at level j: sum_p m_p(t) K^p."""
        mvals = np.array([float(m.value(self.times[j])) for _, m in self.field.terms])
        return np.einsum("npmc,p->nmc", self.state[j][:, :, m_slice, :], mvals)

    def combined_dstate(self, j):
        """Tangent of sum_p m_p(t) Phi^p at level j, per tangent column."""
        t = self.times[j]
        mvals = np.array([float(m.value(t)) for _, m in self.field.terms])
        out = np.einsum("npmi,p->ni", self.dstate[j], mvals)
        for i, (c, e) in enumerate(self.pairs):
            dm = np.array([float(prof.value(t)) for prof in self.directions[e]])
            out[:, i] += np.einsum("npm,p->n", self.state[j][:, :, :, c], dm)
        return out


# ---------------------------------------------------------------------------
# Dirac-source construction and diagnostics
# ---------------------------------------------------------------------------

def dirac_levels(field: CoefficientField, y, s, t_max, cfg: SweepConfig):
    """Level times uniform in sqrt(r - s) and scaled grids around y."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    rho = np.sqrt(t_max - s) * np.arange(1, cfg.n_levels + 1) / cfg.n_levels
    times = np.concatenate([[s], s + rho ** 2])
    step, width = cfg.eta(field.lam)
    n = 2 * int(np.ceil(width / step)) + 1
    grids = [PointSource(tuple(y))]
    for r in rho:
        h = step * r
        half = (n - 1) // 2 * h
        grids.append(LevelGrid(tuple(y - half), (h,) * len(y), (n,) * len(y)))
    return times, grids


def dirac_sweep(field: CoefficientField, y, s, t_max, cfg: SweepConfig = SweepConfig(),
                directions=(), gradient=True) -> Sweep:
    """Sweep for the fundamental solution with source (y, s), run to t_max."""
    if not s < t_max:
        raise DomainError(f"need s < t, got s={s}, t={t_max}")
    times, grids = dirac_levels(field, y, s, t_max, cfg)
    pairs = [(0, e) for e in range(len(directions))]
    sw = Sweep(field, times, grids, [Source(0, init=np.array([1.0]), label="dirac")], cfg,
               power=2, directions=directions, pairs=pairs, outputs=False, gradient=gradient)
    return sw.run()


@dataclass
class SeriesDiagnostics:
    norms: list
    ratios: list
    partial_norms: list
    m_stop: int
    tail_bound: float
    empirical_M: float
    converged: bool

    def as_dict(self):
        return asdict(self)


def series_diagnostics(sw: Sweep, tail_tol=None) -> SeriesDiagnostics:
    """Weighted sup norms sqrt(r - s) |K_m| over all levels, the ratio
    sequence and the stopping index."""
    tail_tol = sw.cfg.tail_tol if tail_tol is None else tail_tol
    s = sw.times[0]
    M = sw.M
    norms = np.zeros(M)
    partial = np.zeros(M)
    for j in range(1, len(sw.times)):
        Kj = sw.combined_state(j)[:, :, 0]             # (N, M)
        wgt = np.sqrt(sw.times[j] - s)
        norms = np.maximum(norms, wgt * np.max(np.abs(Kj), axis=0))
        partial = np.maximum(partial, wgt * np.max(np.abs(np.cumsum(Kj, axis=1)), axis=0))
    m_stop = 0
    for m in range(1, M):
        if norms[m] <= tail_tol * max(partial[m], 1e-300) or partial[m] == 0.0:
            m_stop = m + 1
            break
    if np.all(norms == 0):
        m_stop = 2
    converged = m_stop > 0
    ratios = [float(norms[m + 1] / norms[m]) if norms[m] > 0 else 0.0 for m in range(M - 1)]
    # M_emp from the gamma-function law |K_m| ~ M^m Gamma(1 + m/2)^{-1} (t - s)^{m/2}
    from scipy.special import gammaln
    T = sw.times[-1] - s
    mm = np.arange(1, M + 1)
    ok = norms > 0
    emp = np.exp((np.log(norms[ok]) + gammaln(1 + mm[ok] / 2)) / mm[ok]) / np.sqrt(T) if ok.any() else np.zeros(0)
    return SeriesDiagnostics(norms=[float(v) for v in norms], ratios=ratios,
                             partial_norms=[float(v) for v in partial],
                             m_stop=int(m_stop if converged else M),
                             tail_bound=float(norms[min(m_stop, M) - 1]) if converged else float(norms[-1]),
                             empirical_M=float(np.max(emp)) if len(emp) else 0.0,
                             converged=bool(converged))


def build_Phi(field: CoefficientField, x, t, y, s, cfg: SweepConfig = SweepConfig(), sweep=None):
    """Phi(x, t, y, s) = sum_{m <= m_stop} K_m and series diagnostics.

    Raises
    ------
    NumericalError
        if the term norms do not fall below ``tail_tol`` within ``m_max`` terms.
    """
    if not s < t:
        raise DomainError(f"need s < t, got s={s}, t={t}")
    sw = sweep if sweep is not None else dirac_sweep(field, y, s, t, cfg, gradient=False)
    diag = series_diagnostics(sw)
    if not diag.converged:
        raise NumericalError(f"no decay of K_m after {sw.M} terms", residual=diag.norms[-1])
    X = _as_points(np.atleast_1d(np.asarray(x, dtype=float)), field.dim)
    res = sw.evaluate(X, t, need_state=True)
    mvals = np.array([float(m.value(t)) for _, m in field.terms])
    Km = np.einsum("npm,p->nm", res["state"][:, :, :, 0], mvals)
    value = Km[:, :diag.m_stop].sum(axis=1)
    return (value[0] if value.size == 1 else value), diag


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

_MAGIC = b"PXTABLE1"


@dataclass
class KernelTable:
    """Values of a space-time kernel on the level grids of one source."""

    kind: str
    source: dict
    times: np.ndarray
    grids: list
    values: list            # per level: (n_points, n_columns)
    meta: dict = dc_field(default_factory=dict)

    @classmethod
    def from_sweep(cls, sw: Sweep, kind="K_m"):
        vals = [None]
        for j in range(1, len(sw.times)):
            if kind == "K_m":
                vals.append(sw.combined_state(j)[:, :, 0])
            elif kind == "Phi":
                vals.append(sw.combined_state(j).sum(axis=1)[:, :1])
            else:
                raise DomainError(f"unknown table kind {kind}")
        return cls(kind, sw.grids[0].as_dict(), sw.times.copy(), list(sw.grids), vals)

    def write(self, path):
        """Binary payload at ``path`` and a JSON sidecar at ``path + '.json'``."""
        d = self.grids[1].dim
        ncol = self.values[1].shape[1]
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<qqq", d, len(self.times) - 1, ncol))
            for j in range(1, len(self.times)):
                g = self.grids[j]
                fh.write(struct.pack("<d", self.times[j]))
                fh.write(struct.pack(f"<{d}d", *g.origin))
                fh.write(struct.pack(f"<{d}d", *g.spacing))
                fh.write(struct.pack(f"<{d}q", *g.shape))
            for j in range(1, len(self.times)):
                fh.write(np.ascontiguousarray(self.values[j], dtype="<f8").tobytes())
        side = {"kind": self.kind, "source": self.source, "source_time": float(self.times[0]),
                "levels": len(self.times) - 1, "columns": ncol, **self.meta}
        with open(str(path) + ".json", "w") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)

    @classmethod
    def read(cls, path):
        with open(str(path) + ".json") as fh:
            side = json.load(fh)
        with open(path, "rb") as fh:
            if fh.read(8) != _MAGIC:
                raise DomainError("not a kernel table")
            d, n, ncol = struct.unpack("<qqq", fh.read(24))
            times, grids = [side["source_time"]], [PointSource(tuple(side["source"].get("point", ())))]
            for _ in range(n):
                (tj,) = struct.unpack("<d", fh.read(8))
                o = struct.unpack(f"<{d}d", fh.read(8 * d))
                h = struct.unpack(f"<{d}d", fh.read(8 * d))
                sh = struct.unpack(f"<{d}q", fh.read(8 * d))
                times.append(tj)
                grids.append(LevelGrid(tuple(o), tuple(h), tuple(int(v) for v in sh)))
            vals = [None]
            for j in range(1, n + 1):
                cnt = grids[j].size * ncol
                vals.append(np.frombuffer(fh.read(8 * cnt), dtype="<f8").reshape(grids[j].size, ncol).copy())
        meta = {k: v for k, v in side.items()
                if k not in ("kind", "source", "source_time", "levels", "columns")}
        return cls(side["kind"], side["source"], np.array(times), grids, vals, meta)


def cauchy_sweep(field: CoefficientField, grid: LevelGrid, times, sources: Sequence[Source],
                 cfg: SweepConfig = SweepConfig(mode="resolvent"), directions=(), pairs=(),
                 gradient=False, outputs=True) -> Sweep:
    """Sweep for int Gamma(x, t, y, r_i) f_i(y) dy on a fixed box grid.

    Every source column carries bounded data on the grid at its start level,
    so the time integrands are bounded at both ends (``power = 1``).
    """
    times = np.asarray(times, dtype=float)
    sw = Sweep(field, times, [grid] * len(times), sources, cfg, power=1,
               directions=directions, pairs=pairs, outputs=outputs, gradient=gradient)
    return sw.run()
