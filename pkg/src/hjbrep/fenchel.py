"""Grid Legendre-Fenchel conjugation and assumption checkers.

Grid functions live on uniform rectangular grids in one or two dimensions.
The conjugate ``h*(q) = max_p <q, p> - h(p)`` is computed by brute force
(the reference implementation) or, in one dimension, through the lower convex
hull of the samples.  ``+inf`` marks points outside the effective domain.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import ConfigError, InconsistentGrid
from .geometry import Polytope

OVERFLOW = 1e12


@dataclass(frozen=True)
class Axis:
    """Uniform grid ``linspace(lo, hi, count)``."""

    lo: float
    hi: float
    count: int

    def __post_init__(self):
        if self.count < 3:
            raise InconsistentGrid(f"axis needs at least 3 nodes, got {self.count}")
        if not self.hi > self.lo:
            raise InconsistentGrid(f"axis bounds must satisfy lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def nodes(self):
        return np.linspace(self.lo, self.hi, self.count)

    @property
    def step(self):
        return (self.hi - self.lo) / (self.count - 1)

    @classmethod
    def symmetric(cls, radius, count):
        return cls(-float(radius), float(radius), int(count))


@dataclass
class GridFunction:
    """Samples of a function on a product of uniform axes (``+inf`` allowed)."""

    axes: tuple
    values: np.ndarray
    provenance: str = "sampled"

    def __post_init__(self):
        self.axes = tuple(self.axes)
        self.values = np.asarray(self.values, dtype=float)
        shape = tuple(a.count for a in self.axes)
        if self.values.shape != shape:
            raise InconsistentGrid(f"values shape {self.values.shape} does not match axes {shape}")
        if np.any(np.isnan(self.values)) or np.any(self.values == -np.inf):
            raise ValueError("values must be real or +inf")

    @property
    def dim(self):
        return len(self.axes)

    @property
    def step(self):
        return max(a.step for a in self.axes)

    def points(self):
        """Grid nodes as an array of shape (N, dim), C order."""
        mesh = np.meshgrid(*[a.nodes for a in self.axes], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def finite(self):
        return np.isfinite(self.values)

    @classmethod
    def sample(cls, fn, axes, provenance="sampled"):
        """Evaluate ``fn`` on the nodes; ``fn`` maps (N, dim) to (N,)."""
        g = cls(axes, np.zeros(tuple(a.count for a in axes)), provenance)
        g.values = np.asarray(fn(g.points()), dtype=float).reshape(g.values.shape)
        return g

    def to_json(self):
        vals = [v if np.isfinite(v) else None for v in self.values.ravel().tolist()]
        return json.dumps({
            "axes": [asdict(a) for a in self.axes],
            "shape": list(self.values.shape),
            "provenance": self.provenance,
            "values": vals,
        })

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        vals = np.array([np.inf if v is None else v for v in d["values"]], dtype=float)
        axes = tuple(Axis(**a) for a in d["axes"])
        return cls(axes, vals.reshape(d["shape"]), d["provenance"])

    def to_csv(self, header=None):
        """CSV rows ``(coords..., value)``; ``inf`` cells are written as ``inf``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = header or [f"q{i + 1}" for i in range(self.dim)] + ["value"]
        w.writerow(names)
        for row, v in zip(self.points(), self.values.ravel()):
            w.writerow([f"{c:.12g}" for c in row] + [f"{v:.12g}"])
        return buf.getvalue()


# --------------------------------------------------------------------------
# conjugation


def _llt_1d_brute(p, h, q):
    """``max_j q_i p_j - h_j`` for every row of h; h: (..., Np), q: (Nq,)."""
    h = np.asarray(h, dtype=float)
    out = np.empty(h.shape[:-1] + (len(q),))
    # chunk over q to bound memory
    step = max(1, 4_000_000 // max(1, h.size))
    for s in range(0, len(q), step):
        qs = q[s:s + step]
        out[..., s:s + step] = np.max(qs[:, None] * p[None, :] - h[..., None, :], axis=-1)
    return out


def _lower_hull(p, h):
    """Indices of the lower convex hull of points (p_i, h_i), p increasing."""
    hull = []
    for i in range(len(p)):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            if (h[b] - h[a]) * (p[i] - p[a]) >= (h[i] - h[a]) * (p[b] - p[a]):
                hull.pop()
            else:
                break
        hull.append(i)
    return np.array(hull)


def _llt_1d_fast(p, h, q):
    idx = _lower_hull(p, h)
    hp, hh = p[idx], h[idx]
    slopes = np.diff(hh) / np.diff(hp)
    k = np.searchsorted(slopes, q)
    return q * hp[k] - hh[k]


def _end_slopes(p, h):
    return (h[..., 1] - h[..., 0]) / (p[1] - p[0]), (h[..., -1] - h[..., -2]) / (p[-1] - p[-2])


def llt(h, dual_axes, extend=True, fast=False):
    """Discrete Legendre-Fenchel transform of a grid function.

    Parameters
    ----------
    h : GridFunction
        Samples of the primal function.  Must be finite when ``extend``.
    dual_axes : sequence of Axis
        Grid on which the conjugate is returned.
    extend : bool
        Treat ``h`` as the convex function that continues linearly beyond the
        grid with its end slopes (one dimension) or its boundary recession
        slopes (two dimensions).  Dual points whose slope the extension never
        reaches are then outside the domain and get ``+inf``.  With
        ``extend=False`` the maximum runs over the grid nodes only.
    fast : bool
        One-dimensional lower-hull path instead of brute force.

    Returns
    -------
    GridFunction
        Conjugate values; entries above ``OVERFLOW`` are ``+inf``.
    """
    dual_axes = tuple(dual_axes)
    if len(dual_axes) != h.dim:
        raise ConfigError("dual grid dimension does not match the primal grid")
    if h.values.size == 0 or not np.any(h.finite):
        raise ConfigError("cannot conjugate an empty grid function")
    if extend and not np.all(h.finite):
        raise ConfigError("linear extension needs a finite grid function")
    vals = h.values
    if h.dim == 1:
        p, q = h.axes[0].nodes, dual_axes[0].nodes
        if fast:
            keep = np.isfinite(vals)
            out = _llt_1d_fast(p[keep], vals[keep], q)
        else:
            out = _llt_1d_brute(p, vals, q)
        if extend:
            s_lo, s_hi = _end_slopes(p, vals)
            tol_lo = 1e-9 * max(1.0, abs(s_lo))
            tol_hi = 1e-9 * max(1.0, abs(s_hi))
            out = np.where((q < s_lo - tol_lo) | (q > s_hi + tol_hi), np.inf, out)
    elif h.dim == 2:
        p1, p2 = h.axes[0].nodes, h.axes[1].nodes
        q1, q2 = dual_axes[0].nodes, dual_axes[1].nodes
        # sweep over p1 for every p2 column, then over p2
        g = _llt_1d_brute(p1, vals.T, q1)          # (Np2, Nq1)
        out = _llt_1d_brute(p2, -g.T, q2)          # (Nq1, Nq2)
        if extend:
            out = np.where(_recession_mask(h, q1, q2), out, np.inf)
    else:
        raise ConfigError("conjugation supports one or two dimensions")
    out = np.where(out > OVERFLOW, np.inf, out)
    return GridFunction(dual_axes, out, "conjugate")


def _recession_mask(h, q1, q2):
    """Dual nodes allowed by the boundary recession slopes of a 2-D grid function.

    For a ray from the grid center through a boundary node b, the slope of
    ``h`` over the last cell approximates the support function of the
    conjugate's domain in that direction.
    """
    a1, a2 = h.axes
    interp = RegularGridInterpolator((a1.nodes, a2.nodes), h.values)
    c = np.array([(a1.lo + a1.hi) / 2, (a2.lo + a2.hi) / 2])
    pts = h.points()
    on_ring = ((np.isclose(pts[:, 0], a1.lo) | np.isclose(pts[:, 0], a1.hi))
               | (np.isclose(pts[:, 1], a2.lo) | np.isclose(pts[:, 1], a2.hi)))
    ring = pts[on_ring]
    rad = np.linalg.norm(ring - c, axis=1)
    d = (ring - c) / rad[:, None]
    delta = min(a1.step, a2.step)
    inner = ring - delta * d
    slope = (h.values.ravel()[on_ring] - interp(inner)) / delta
    Q = np.stack(np.meshgrid(q1, q2, indexing="ij"), axis=-1)
    excess = np.einsum("ijk,rk->ijr", Q, d) - slope
    tol = 1e-9 * np.maximum(1.0, np.abs(slope))
    return np.all(excess <= tol, axis=-1)


def biconjugate_residual(h, dual_axes=None, inner=0.5):
    """Sup-norm of ``h** - h`` over the central ``inner`` fraction of the grid.

    The first transform uses the linear extension, the second runs over the
    finite dual nodes only.  In one dimension the default dual grid spans the
    end slopes with as many nodes as the primal grid.
    """
    if dual_axes is None:
        if h.dim != 1:
            raise ConfigError("dual axes are required in two dimensions")
        s_lo, s_hi = _end_slopes(h.axes[0].nodes, h.values)
        if s_hi - s_lo < 1e-12:
            s_lo, s_hi = s_lo - 1.0, s_hi + 1.0
        dual_axes = (Axis(float(s_lo), float(s_hi), h.axes[0].count),)
    hs = llt(h, dual_axes, extend=True)
    hss = llt(hs, h.axes, extend=False)
    pts = h.points()
    mask = np.ones(len(pts), dtype=bool)
    for k, a in enumerate(h.axes):
        mid, half = (a.lo + a.hi) / 2, (a.hi - a.lo) / 2
        mask &= np.abs(pts[:, k] - mid) <= inner * half + 1e-12
    diff = np.abs(hss.values.ravel() - h.values.ravel())[mask]
    return float(diff.max())


# --------------------------------------------------------------------------
# conjugate data of a Hamiltonian at (t, x)


@dataclass
class ConjugateData:
    """Conjugate of ``H(t, x, .)`` and the sets it defines.

    Attributes
    ----------
    hstar : GridFunction
        ``q -> H*(t, x, q)`` on the dual grid.
    domain : Polytope
        Hull of the finite dual nodes (the velocity set).
    gamma : float
        ``max(0, max H*)`` over the domain.
    graph_norm : float
        ``max |(q, H*(q))|`` over the domain.
    """

    t: float
    x: np.ndarray
    hstar: GridFunction
    domain: Polytope
    gamma: float
    graph_norm: float

    @property
    def graph_points(self):
        """Finite graph samples ``(q, H*(q))``, shape (N, n+1)."""
        f = self.hstar.finite.ravel()
        return np.c_[self.hstar.points()[f], self.hstar.values.ravel()[f]]

    def hstar_at(self, q):
        """Linear interpolation of H* (``+inf`` outside the domain)."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        return interpolate(self.hstar, q)


def interpolate(g, pts):
    """Multilinear interpolation of a grid function that may contain ``+inf``.

    A point gets ``+inf`` when any contributing corner (nonzero weight) is
    infinite or the point is off the grid.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n = g.dim
    idx0, frac, inside = [], [], np.ones(len(pts), dtype=bool)
    for k, a in enumerate(g.axes):
        s = (pts[:, k] - a.lo) / a.step
        snap = np.abs(s - np.round(s)) < 1e-9
        s = np.where(snap, np.round(s), s)
        inside &= (s >= 0) & (s <= a.count - 1)
        i = np.clip(np.floor(s).astype(int), 0, a.count - 2)
        idx0.append(i)
        frac.append(np.clip(s - i, 0.0, 1.0))
    out = np.zeros(len(pts))
    vals = g.values
    for corner in range(2 ** n):
        w = np.ones(len(pts))
        ids = []
        for k in range(n):
            bit = (corner >> k) & 1
            w = w * (frac[k] if bit else 1 - frac[k])
            ids.append(idx0[k] + bit)
        v = vals[tuple(ids)]
        contrib = np.where(w > 0, w * np.where(np.isfinite(v), v, 0.0), 0.0)
        bad = (w > 0) & ~np.isfinite(v)
        out = np.where(bad, np.inf, out + contrib)
    out[~inside] = np.inf
    return out


def default_pgrid(H, t, x, qaxes, count=None):
    """Primal grid of radius four times the slope bound of ``H(t, x, .)``."""
    qr = max(max(abs(a.lo), abs(a.hi)) for a in qaxes)
    radius = 4.0 * max(H.slope_bound(t, x, qr), 1.0)
    counts = count or [4 * (a.count - 1) + 1 for a in qaxes]
    if np.isscalar(counts):
        counts = [counts] * len(qaxes)
    return tuple(Axis.symmetric(radius, c) for c in counts)


def _domain_from_mask(qpts, finite, dim):
    pts = qpts[finite.ravel()]
    if len(pts) == 0:
        raise InconsistentGrid("conjugate is +inf everywhere: enlarge the grids")
    if dim == 1:
        return Polytope([[pts.min()], [pts.max()]])
    return Polytope(pts)


def _make_data(t, x, qaxes, values, qpts):
    hstar = GridFunction(qaxes, values, "conjugate")
    fin = hstar.finite
    domain = _domain_from_mask(qpts, fin, len(qaxes))
    v = values.ravel()[fin.ravel()]
    gamma = max(0.0, float(v.max()))
    graph = np.c_[qpts[fin.ravel()], v]
    gnorm = float(np.linalg.norm(graph, axis=1).max())
    return ConjugateData(float(t), np.asarray(x, dtype=float), hstar, domain, gamma, gnorm)


def conjugate_data(H, t, x, qaxes, paxes=None):
    """Conjugate data of ``H(t, x, .)`` on the dual grid ``qaxes``.

    Raises InconsistentGrid when no dual node is finite.
    """
    qaxes = tuple(qaxes)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    paxes = tuple(paxes) if paxes is not None else default_pgrid(H, t, x, qaxes)
    h = GridFunction.sample(lambda p: H.eval(t, x, p), paxes)
    hs = llt(h, qaxes, extend=True)
    return _make_data(t, x, qaxes, hs.values, hs.points())


def conjugate_values_batch(H, t, xs, qaxes, paxes=None):
    """Conjugate values for many states at one time, shape (len(xs), *qcounts)."""
    qaxes = tuple(qaxes)
    xs = np.asarray(xs, dtype=float).reshape(len(xs), -1)
    if len(qaxes) != 1:
        return np.stack([conjugate_data(H, t, x, qaxes, paxes).hstar.values for x in xs])
    if paxes is None:
        radius = max(default_pgrid(H, t, x, qaxes)[0].hi for x in xs)
        paxes = (Axis.symmetric(radius, 4 * (qaxes[0].count - 1) + 1),)
    p = paxes[0].nodes
    q = qaxes[0].nodes
    hv = H.eval_pairs(t, np.repeat(xs, len(p), axis=0), np.tile(p, len(xs))[:, None])
    hv = hv.reshape(len(xs), len(p))
    out = _llt_1d_brute(p, hv, q)
    s_lo, s_hi = _end_slopes(p, hv)
    tl = 1e-9 * np.maximum(1.0, np.abs(s_lo))[:, None]
    th = 1e-9 * np.maximum(1.0, np.abs(s_hi))[:, None]
    out = np.where((q[None] < s_lo[:, None] - tl) | (q[None] > s_hi[:, None] + th), np.inf, out)
    return np.where(out > OVERFLOW, np.inf, out)


def conjugate_data_batch(H, t, xs, qaxes, paxes=None):
    """:func:`conjugate_data` for many states at one time."""
    qaxes = tuple(qaxes)
    xs = np.asarray(xs, dtype=float).reshape(len(xs), -1)
    vals = conjugate_values_batch(H, t, xs, qaxes, paxes)
    qpts = GridFunction(qaxes, vals[0]).points()
    return [_make_data(t, x, qaxes, row, qpts) for x, row in zip(xs, vals)]


# --------------------------------------------------------------------------
# assumption checkers


@dataclass
class CheckReport:
    name: str
    value: float
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "value": self.value, "passed": self.passed, **self.details}


def _sample_ball(rng, n, dim, r):
    v = rng.normal(size=(n, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * r * rng.uniform(size=(n, 1)) ** (1.0 / dim)


def check_H11(H, times, radius=2.0, prad=5.0, n=2000, seed=0, tol=1e-9):
    """Largest midpoint-convexity violation of ``p -> H(t, x, p)``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in times:
        xs = _sample_ball(rng, 8, H.n, radius)
        for x in xs:
            p1 = _sample_ball(rng, n // 8, H.n, prad)
            p2 = _sample_ball(rng, n // 8, H.n, prad)
            viol = H.eval(t, x, (p1 + p2) / 2) - (H.eval(t, x, p1) + H.eval(t, x, p2)) / 2
            worst = max(worst, float(viol.max()))
    return CheckReport("H11", worst, worst <= tol, {"statement": "midpoint convexity in p"})


def check_H12(H, t, r, n=500, prad=5.0, seed=0):
    """Empirical ``C_r(t)``: max of ``|H(t,x,p) - H(t,y,p)| / ((1+|p|)|x-y|)``."""
    rng = np.random.default_rng(seed)
    xs = _sample_ball(rng, n, H.n, r)
    ys = np.where(rng.uniform(size=(n, 1)) < 0.5,
                  xs + _sample_ball(rng, n, H.n, 1e-3 * max(r, 1.0)),
                  _sample_ball(rng, n, H.n, r))
    ys = np.clip(ys, -r, r)
    ps = _sample_ball(rng, n, H.n, prad)
    best = 0.0
    for x, y, p in zip(xs, ys, ps):
        dx = np.linalg.norm(x - y)
        if dx < 1e-12:
            continue
        diff = abs(H.eval(t, x, p[None])[0] - H.eval(t, y, p[None])[0])
        best = max(best, diff / ((1 + np.linalg.norm(p)) * dx))
    return CheckReport("H12", float(best), bool(np.isfinite(best)), {"t": t, "r": r})


def _slope_estimate(H, t, xs, radius, rng, n):
    best = 0.0
    for x in xs:
        p = _sample_ball(rng, n, H.n, radius)
        dp = _sample_ball(rng, n, H.n, 1e-3 * radius) + 1e-6
        num = np.abs(H.eval(t, x, p + dp) - H.eval(t, x, p))
        best = max(best, float(np.max(num / np.linalg.norm(dp, axis=1))) / (1 + np.linalg.norm(x)))
    return best


def check_H13(H, t, xradius=2.0, prad=4.0, n=400, seed=0):
    """Empirical ``c~(t)`` and an unboundedness flag.

    The slope is estimated on two momentum balls of radius ``prad`` and
    ``8 prad``; growth by more than 25% marks the slope as unbounded.
    """
    rng = np.random.default_rng(seed)
    xs = np.concatenate([np.zeros((1, H.n)), _sample_ball(rng, 7, H.n, xradius)])
    small = _slope_estimate(H, t, xs, prad, rng, n)
    large = _slope_estimate(H, t, xs, 8 * prad, rng, n)
    unbounded = large > 1.25 * small + 1e-9
    return CheckReport("H13", float(small), not unbounded,
                       {"t": t, "slope_large_ball": large, "unbounded": bool(unbounded)})


def check_H14(conj_list, ball_radius=None):
    """Boundedness of ``H*`` near the boundary of its domain.

    On a compact grid domain local and global boundedness coincide; the
    report carries the global maximum over finite cells.
    """
    worst = 0.0
    for cd in conj_list:
        v = cd.hstar.values[cd.hstar.finite]
        worst = max(worst, float(np.abs(v).max()))
    return CheckReport("H14", worst, worst < OVERFLOW,
                       {"note": "local and global bounds coincide on a compact grid domain"})


def check_H25_H26(H, omega, envelopes, times, qaxes, n_x=21):
    """Check declared envelopes ``phi, phi_tilde, psi`` against computed conjugates.

    ``envelopes`` maps names to callables of t.  Reports the largest
    violation of ``phi <= H* <= phi_tilde (1 + |x|)`` and ``|q| + |H*| <= psi``
    over states sampled in ``omega`` (vertices included).
    """
    if not envelopes or any(k not in envelopes for k in ("phi", "phi_tilde", "psi")):
        raise ConfigError("envelopes phi, phi_tilde and psi must be declared")
    phi, phit, psi = envelopes["phi"], envelopes["phi_tilde"], envelopes["psi"]
    lo, hi = omega.vertices.min(axis=0), omega.vertices.max(axis=0)
    grids = np.meshgrid(*[np.linspace(l, h, n_x) for l, h in zip(lo, hi)], indexing="ij")
    xs = np.stack([g.ravel() for g in grids], axis=1)
    xs = np.concatenate([xs[omega.contains(xs)], omega.vertices])
    v25 = v26 = 0.0
    tol = 1e-9
    for t in times:
        for cd in conjugate_data_batch(H, t, xs, qaxes):
            g = cd.graph_points
            hs = g[:, -1]
            q = g[:, :-1]
            nx = np.linalg.norm(cd.x)
            v25 = max(v25, float(np.max(phi(t) - hs)), float(np.max(hs - phit(t) * (1 + nx))))
            v26 = max(v26, float(np.max(np.linalg.norm(q, axis=1) + np.abs(hs) - psi(t))))
    v25, v26 = max(v25, 0.0), max(v26, 0.0)
    return (CheckReport("H25", v25, v25 <= tol), CheckReport("H26", v26, v26 <= tol))


# descriptive names for the assumption checkers
check_convexity = check_H11
check_state_lipschitz = check_H12
check_slope_bound = check_H13
check_conjugate_bounded = check_H14
check_envelopes = check_H25_H26
