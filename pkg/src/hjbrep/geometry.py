"""Compact convex bodies in dimension <= 3.

Bodies are either V-polytopes (:class:`Polytope`) or bodies known only through
their metric projection (:class:`BallIntersection`, the intersection of a
closed convex set with a ball).  On top of these the module provides support
functions, Hausdorff distances, the localizing projection map
``P(u, J) = J ∩ B(u, 2 d(u, J))``, the Steiner point and polyhedral cones.

All routines are vectorized over leading point axes: a point is an array of
shape ``(m,)`` and a batch of points an array of shape ``(N, m)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls
from scipy.spatial import ConvexHull

from .errors import DomainError, NumericalFailure, UnsupportedRepresentation

MAX_DIM = 3
FACE_TOL = 1e-9
_CHUNK = 1_500_000
_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def _batch(y, dim):
    arr = np.asarray(y, dtype=float)
    single = arr.ndim <= 1
    arr = arr.reshape(-1, dim)
    return arr, single


def _unbatch(arr, single):
    return arr[0] if single else arr


class ConvexBody:
    """A nonempty closed convex set in R^dim, 1 <= dim <= 3."""

    dim: int
    bounding_radius: float

    def project(self, y):
        raise NotImplementedError

    def support_points(self, directions):
        """Return one maximizer of ``<d, .>`` over the body per direction."""
        raise NotImplementedError

    def boundary_sample(self, n=256):
        """Points containing the extreme points relevant to excess estimates."""
        raise NotImplementedError

    def distance(self, y):
        pts, single = _batch(y, self.dim)
        d = np.linalg.norm(pts - self.project(pts), axis=1)
        return float(d[0]) if single else d

    def contains(self, y, tol=1e-9):
        d = self.distance(y)
        return d <= tol * (1.0 + self.bounding_radius)

    @property
    def has_vertices(self):
        return False


# --------------------------------------------------------------------------
# closest points on simplices (facets of full-dimensional hulls)


def _closest_on_segments(y, a, b):
    """y: (N, m); a, b: (K, m) -> closest points (N, K, m)."""
    ab = b - a
    den = np.einsum("km,km->k", ab, ab)
    den = np.where(den > 0, den, 1.0)
    t = np.einsum("nkm,km->nk", y[:, None, :] - a[None], ab) / den
    t = np.clip(t, 0.0, 1.0)
    return a[None] + t[..., None] * ab[None]


def _closest_on_triangles(y, a, b, c):
    """Closest points on triangles (K, 3) for points y (N, 3)."""
    e0, e1 = b - a, c - a
    nrm = np.cross(e0, e1)
    nn = np.einsum("km,km->k", nrm, nrm)
    nn = np.where(nn > 0, nn, 1.0)
    w = y[:, None, :] - a[None]
    # plane projection and barycentric coordinates
    dist = np.einsum("nkm,km->nk", w, nrm) / nn
    proj = y[:, None, :] - dist[..., None] * nrm[None]
    wp = proj - a[None]
    d00 = np.einsum("km,km->k", e0, e0)
    d01 = np.einsum("km,km->k", e0, e1)
    d11 = np.einsum("km,km->k", e1, e1)
    d20 = np.einsum("nkm,km->nk", wp, e0)
    d21 = np.einsum("nkm,km->nk", wp, e1)
    den = d00 * d11 - d01 * d01
    den = np.where(np.abs(den) > 0, den, 1.0)
    v = (d11 * d20 - d01 * d21) / den
    w2 = (d00 * d21 - d01 * d20) / den
    inside = (v >= 0) & (w2 >= 0) & (v + w2 <= 1)
    best = proj.copy()
    cands = [_closest_on_segments(y, a, b), _closest_on_segments(y, b, c),
             _closest_on_segments(y, c, a)]
    dists = np.stack([np.linalg.norm(y[:, None, :] - cq, axis=-1) for cq in cands])
    k = np.argmin(dists, axis=0)
    edge_best = np.choose(k[..., None], cands)
    best[~inside] = edge_best[~inside]
    return best


class Polytope(ConvexBody):
    """Convex hull of finitely many points (a V-polytope).

    Lower-dimensional hulls (segments in the plane, polygons in space, single
    points) are handled by working in coordinates of their affine hull.
    """

    def __init__(self, vertices):
        pts = np.atleast_2d(np.asarray(vertices, dtype=float))
        if pts.size == 0:
            raise ValueError("vertex list must be nonempty")
        if pts.ndim != 2 or not 1 <= pts.shape[1] <= MAX_DIM:
            raise ValueError(f"vertices must have shape (k, m) with m <= {MAX_DIM}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("vertices must be finite")
        self.dim = pts.shape[1]
        self._raw = pts
        scale = max(1.0, float(np.abs(pts).max()))
        origin = pts.mean(axis=0)
        _, s, vt = np.linalg.svd(pts - origin, full_matrices=True)
        rank = int(np.sum(s > 1e-10 * scale))
        self.rank = rank
        self._origin = origin
        self._sub = None
        self._hull = None
        if rank == self.dim:
            if self.dim == 1:
                lo, hi = pts.min(), pts.max()
                self.vertices = np.array([[lo], [hi]])
                self._lo, self._hi = float(lo), float(hi)
            else:
                hull = ConvexHull(pts)
                self._hull = hull
                self.vertices = pts[hull.vertices]
                self._facets = pts[hull.simplices]
                self._eq = hull.equations
        elif rank == 0:
            self.vertices = origin[None, :]
        else:
            self._basis = vt[:rank].T  # (dim, rank)
            self._comp = vt[rank:].T
            local = (pts - origin) @ self._basis
            self._sub = Polytope(local)
            self.vertices = self._sub.vertices @ self._basis.T + origin
        self.bounding_radius = float(np.linalg.norm(self.vertices, axis=1).max())

    def __repr__(self):
        return f"Polytope(dim={self.dim}, nverts={len(self.vertices)})"

    @property
    def has_vertices(self):
        return True

    @property
    def full_dimensional(self):
        return self.rank == self.dim

    def to_json(self):
        return {"vertices": self.vertices.tolist()}

    # -- projection ---------------------------------------------------------

    def project(self, y):
        pts, single = _batch(y, self.dim)
        if self.rank == 0:
            out = np.broadcast_to(self._origin, pts.shape).copy()
        elif self._sub is not None:
            local = (pts - self._origin) @ self._basis
            out = self._sub.project(local).reshape(-1, self.rank) @ self._basis.T + self._origin
        elif self.dim == 1:
            out = np.clip(pts, self._lo, self._hi)
        else:
            out = self._project_full(pts)
        return _unbatch(out, single)

    def _project_full(self, pts):
        out = pts.copy()
        tol = 1e-12 * (1.0 + self.bounding_radius)
        viol = pts @ self._eq[:, :-1].T + self._eq[:, -1]
        outside = np.nonzero(np.any(viol > tol, axis=1))[0]
        if outside.size == 0:
            return out
        k = len(self._facets)
        step = max(1, _CHUNK // (k * self.dim * 4))
        for start in range(0, outside.size, step):
            idx = outside[start:start + step]
            y = pts[idx]
            f = self._facets
            if self.dim == 2:
                cand = _closest_on_segments(y, f[:, 0], f[:, 1])
            else:
                cand = _closest_on_triangles(y, f[:, 0], f[:, 1], f[:, 2])
            d = np.linalg.norm(cand - y[:, None, :], axis=-1)
            j = np.argmin(d, axis=1)
            out[idx] = cand[np.arange(len(idx)), j]
        return out

    def contains(self, y, tol=1e-9):
        pts, single = _batch(y, self.dim)
        t = tol * (1.0 + self.bounding_radius)
        if self.full_dimensional and self.dim == 1:
            res = (pts[:, 0] >= self._lo - t) & (pts[:, 0] <= self._hi + t)
        elif self.full_dimensional:
            res = np.all(pts @ self._eq[:, :-1].T + self._eq[:, -1] <= t, axis=1)
        else:
            res = np.linalg.norm(pts - self.project(pts), axis=1) <= t
        return bool(res[0]) if single else res

    # -- support function ---------------------------------------------------

    def support(self, p):
        """Support value and the argmax face (vertices within tolerance)."""
        p = np.asarray(p, dtype=float).reshape(self.dim)
        scores = self.vertices @ p
        top = scores.max()
        tau = FACE_TOL * max(self.bounding_radius, 1e-300) * max(np.linalg.norm(p), 1.0)
        face = self.vertices[scores >= top - tau]
        return float(top), face

    def support_points(self, directions):
        d, single = _batch(directions, self.dim)
        scores = d @ self.vertices.T
        top = scores.max(axis=1, keepdims=True)
        tau = FACE_TOL * max(self.bounding_radius, 1e-300) * np.maximum(
            np.linalg.norm(d, axis=1, keepdims=True), 1.0)
        tied = scores >= top - tau
        out = self.vertices[np.argmax(scores, axis=1)].copy()
        multi = np.nonzero(tied.sum(axis=1) > 1)[0]
        for i in multi:
            # pr of the exposed face: minimal-norm point of its hull
            out[i] = Polytope(self.vertices[tied[i]]).project(np.zeros(self.dim))
        return _unbatch(out, single)

    # -- structure ----------------------------------------------------------

    def halfspaces(self):
        """Unit outward normals A and offsets b with ``A x <= b`` on the body.

        Only available for full-dimensional polytopes.
        """
        if not self.full_dimensional:
            raise UnsupportedRepresentation("halfspaces need a full-dimensional polytope")
        if self.dim == 1:
            return np.array([[-1.0], [1.0]]), np.array([-self._lo, self._hi])
        a = self._eq[:, :-1]
        b = -self._eq[:, -1]
        keys = np.round(np.c_[a, b], 10)
        _, first = np.unique(keys, axis=0, return_index=True)
        first = np.sort(first)
        return a[first], b[first]

    def facets(self):
        """Facet vertex arrays, shape (K, dim, dim); endpoints in 1-D."""
        if not self.full_dimensional:
            raise UnsupportedRepresentation("facets need a full-dimensional polytope")
        if self.dim == 1:
            return self.vertices[:, None, :]
        return self._facets

    def boundary_sample(self, n=0):
        """Vertices, plus ``n`` evenly spread points per facet when n > 0."""
        pts = [self.vertices]
        if n > 0 and self.full_dimensional and self.dim >= 2:
            f = self._facets
            if self.dim == 2:
                s = np.linspace(0, 1, n + 2)[1:-1]
                pts.append((f[:, None, 0] * (1 - s)[None, :, None]
                            + f[:, None, 1] * s[None, :, None]).reshape(-1, 2))
            else:
                rng = np.random.default_rng(0)
                w = rng.dirichlet(np.ones(3), size=n)
                pts.append(np.einsum("sj,kjm->ksm", w, f).reshape(-1, 3))
        return np.concatenate(pts)


# --------------------------------------------------------------------------
# intersections with balls


def _ball_cap_project(base, y, c, rho, iters=60):
    """Project rows of y onto ``base ∩ B(c_i, rho_i)`` (row-wise c, rho).

    Uses the parametric path ``w -> proj_base((1 - w) y + w c)``: the distance
    of that point from c is nonincreasing in w, and the KKT point of the
    constrained projection lies on it.
    """
    q = base.project(y)
    g = np.linalg.norm(q - c, axis=1)
    todo = np.nonzero(g > rho * (1 + 1e-13) + 1e-15)[0]
    if todo.size == 0:
        return q
    yy, cc, rr = y[todo], c[todo], rho[todo]
    lo = np.zeros(todo.size)
    hi = np.ones(todo.size)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        qm = base.project((1 - mid)[:, None] * yy + mid[:, None] * cc)
        ok = np.linalg.norm(qm - cc, axis=1) <= rr
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    q[todo] = base.project((1 - hi)[:, None] * yy + hi[:, None] * cc)
    return q


def _ball_cap_support(base, d, c, rho, iters=56):
    """Maximizers of ``<d_i, .>`` over ``base ∩ B(c_i, rho_i)``.

    For a multiplier ``mu > 0`` on the ball constraint the Lagrangian
    maximizer is ``proj_base(c + d / mu)``; its distance to c is
    nondecreasing in ``s = 1 / mu``, so the active ``s`` is found by
    bracketing and bisection.
    """
    n = len(d)
    dn = d / np.linalg.norm(d, axis=1, keepdims=True)
    hi = rho.copy()
    bracketed = np.zeros(n, dtype=bool)
    saturated = np.zeros(n, dtype=bool)
    for _ in range(40):
        act = np.nonzero(~bracketed & ~saturated)[0]
        if act.size == 0:
            break
        q = base.project(c[act] + hi[act, None] * dn[act])
        reach = np.linalg.norm(q - c[act], axis=1) >= rho[act]
        bracketed[act[reach]] = True
        # d in the normal cone at q: q maximizes <d, .> over the base and lies in the ball
        step = base.project(q + rho[act, None] * dn[act])
        still = ~reach & (np.linalg.norm(step - q, axis=1) <= 1e-12 * (1 + rho[act]))
        saturated[act[still]] = True
        grow = act[~reach & ~still]
        hi[grow] *= 4.0
    lo = np.zeros(n)
    idx = np.nonzero(bracketed)[0]
    if idx.size:
        l, h = lo[idx], hi[idx]
        cc, dd, rr = c[idx], dn[idx], rho[idx]
        for _ in range(iters):
            mid = 0.5 * (l + h)
            q = base.project(cc + mid[:, None] * dd)
            ok = np.linalg.norm(q - cc, axis=1) <= rr
            l = np.where(ok, mid, l)
            h = np.where(ok, h, mid)
        lo[idx] = l
    s = np.where(bracketed, lo, hi)
    return base.project(c + s[:, None] * dn)


def _exact_cap_ok(base):
    return isinstance(base, Polytope) and base.full_dimensional and base.dim <= 2


def _cap_support_exact(base, dirs, c, rho):
    """Maximizers over ``base ∩ B(c, rho)`` for many unit directions (one cap).

    A linear function on a polygon cut by a disk peaks at the disk's own
    support point when that point lies in the polygon; otherwise at a
    polygon vertex inside the disk or at an edge-circle crossing.
    """
    if base.dim == 1:
        lo = max(base._lo, c[0] - rho)
        hi = min(base._hi, c[0] + rho)
        return np.where(dirs[:, :1] > 0, hi, np.where(dirs[:, :1] < 0, lo, 0.5 * (lo + hi)))
    A, b = base.halfspaces()
    disk = c[None, :] + rho * dirs
    in_base = np.all(disk @ A.T <= b + 1e-12 * (1 + base.bounding_radius), axis=1)
    out = disk.copy()
    if np.all(in_base):
        return out
    v = base.vertices
    cands = [v[np.linalg.norm(v - c, axis=1) <= rho * (1 + 1e-12)]]
    f = base.facets()
    a0, ab = f[:, 0], f[:, 1] - f[:, 0]
    w = a0 - c
    qa = np.einsum("ij,ij->i", ab, ab)
    qb = 2 * np.einsum("ij,ij->i", ab, w)
    qc = np.einsum("ij,ij->i", w, w) - rho ** 2
    disc = qb ** 2 - 4 * qa * qc
    for sgn in (-1.0, 1.0):
        with np.errstate(invalid="ignore", divide="ignore"):
            t = (-qb + sgn * np.sqrt(disc)) / (2 * qa)
        ok = (disc >= 0) & (qa > 0) & (t >= -1e-12) & (t <= 1 + 1e-12)
        cands.append(a0[ok] + np.clip(t[ok], 0, 1)[:, None] * ab[ok])
    cands = np.concatenate(cands)
    if len(cands) == 0:
        return out
    miss = ~in_base
    out[miss] = cands[np.argmax(dirs[miss] @ cands.T, axis=1)]
    return out


class BallIntersection(ConvexBody):
    """``base ∩ B(center, radius)``, known through its metric projection.

    The base may be unbounded (e.g. an epigraph); the intersection is bounded.
    """

    def __init__(self, base, center, radius):
        self.base = base
        self.dim = base.dim
        self.center = np.asarray(center, dtype=float).reshape(self.dim)
        self.radius = float(radius)
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if base.distance(self.center) > self.radius * (1 + 1e-9):
            raise DomainError("ball does not meet the base set")
        self.bounding_radius = float(np.linalg.norm(self.center) + self.radius)

    def __repr__(self):
        return f"BallIntersection(center={self.center}, radius={self.radius:.6g})"

    def project(self, y, method="path"):
        pts, single = _batch(y, self.dim)
        if method == "dykstra":
            out = np.array([dykstra_project(p, self.base.project, self._ball_project)
                            for p in pts])
        else:
            c = np.broadcast_to(self.center, pts.shape)
            r = np.full(len(pts), self.radius)
            out = _ball_cap_project(self.base, pts, c, r)
        return _unbatch(out, single)

    def _ball_project(self, y):
        v = y - self.center
        nv = np.linalg.norm(v)
        return y if nv <= self.radius else self.center + v * (self.radius / nv)

    def support_points(self, directions, method="auto"):
        d, single = _batch(directions, self.dim)
        if method == "auto" and _exact_cap_ok(self.base):
            dn = d / np.linalg.norm(d, axis=1, keepdims=True)
            return _unbatch(_cap_support_exact(self.base, dn, self.center, self.radius), single)
        c = np.broadcast_to(self.center, d.shape).copy()
        r = np.full(len(d), self.radius)
        return _unbatch(_ball_cap_support(self.base, d, c, r), single)

    def support(self, p):
        p = np.asarray(p, dtype=float).reshape(self.dim)
        if not np.any(p):
            return 0.0, self.project(self.center)[None]
        q = self.support_points(p)
        return float(q @ p), q[None]

    def boundary_sample(self, n=256):
        pts = [self.support_points(sphere_directions(self.dim, n))]
        if isinstance(self.base, Polytope):
            v = self.base.vertices
            pts.append(v[np.linalg.norm(v - self.center, axis=1) <= self.radius])
            if self.dim == 2 and self.base.full_dimensional:
                pts.append(self._edge_circle_points())
        return np.concatenate([p for p in pts if len(p)])

    def _edge_circle_points(self):
        f = self.base.facets()
        a, ab = f[:, 0], f[:, 1] - f[:, 0]
        w = a - self.center
        qa = np.einsum("ij,ij->i", ab, ab)
        qb = 2 * np.einsum("ij,ij->i", ab, w)
        qc = np.einsum("ij,ij->i", w, w) - self.radius ** 2
        disc = qb ** 2 - 4 * qa * qc
        out = []
        for sgn in (-1.0, 1.0):
            with np.errstate(invalid="ignore", divide="ignore"):
                t = (-qb + sgn * np.sqrt(disc)) / (2 * qa)
            ok = (disc >= 0) & (qa > 0) & (t >= 0) & (t <= 1)
            out.append(a[ok] + t[ok, None] * ab[ok])
        return np.concatenate(out)


def dykstra_project(y, proj_a, proj_b, max_sweeps=500, tol=1e-10):
    """Dykstra's alternating projections onto ``A ∩ B``.

    Raises NumericalFailure when the iterate still moves by more than ``tol``
    after ``max_sweeps`` sweeps.
    """
    x = np.asarray(y, dtype=float).copy()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(max_sweeps):
        yk = proj_a(x + p)
        p = x + p - yk
        xn = proj_b(yk + q)
        q = yk + q - xn
        if np.linalg.norm(xn - x) <= tol:
            return xn
        x = xn
    raise NumericalFailure(f"Dykstra did not converge in {max_sweeps} sweeps")


# --------------------------------------------------------------------------
# public operations


def support(J, p):
    """Support value ``max_{q in J} <p, q>`` and its argmax face."""
    if not J.has_vertices and not isinstance(J, BallIntersection):
        raise UnsupportedRepresentation("support needs a vertex list")
    return J.support(p)


def project_point(J, u):
    return J.project(u)


def hausdorff(J, K, n_dirs=256, face_samples=0):
    """Hausdorff distance between two bounded convex bodies.

    For polytopes the one-sided excess is attained at a vertex and the value
    is exact; oracle bodies are sampled along ``n_dirs`` support directions.
    """
    def excess(a, b):
        if isinstance(a, Polytope):
            pts = a.boundary_sample(face_samples)
        else:
            pts = a.boundary_sample(n_dirs)
        return float(np.max(np.linalg.norm(pts - b.project(pts).reshape(pts.shape), axis=1)))

    return max(excess(J, K), excess(K, J))


def proj_map(u, J, tol=1e-12):
    """Localizing projection map ``P(u, J) = J ∩ B(u, 2 d(u, J))``."""
    u = np.asarray(u, dtype=float).reshape(J.dim)
    d = float(np.linalg.norm(u - J.project(u)))
    if d <= tol * (1.0 + J.bounding_radius):
        return Polytope(u[None, :])
    return BallIntersection(J, u, 2.0 * d)


def min_norm_point(S):
    """The element of minimal norm of a closed convex set or cone."""
    if isinstance(S, Cone):
        return np.zeros(S.dim)
    return S.project(np.zeros(S.dim))


def sphere_directions(dim, n):
    """Deterministic, nearly uniform unit vectors on the sphere.

    In the plane the angles form a shifted equispaced grid, so the first
    ``n // 2`` points of the set for ``n`` are the set for ``n // 2`` taken
    every other point.
    """
    if dim == 1:
        return np.array([[-1.0], [1.0]])
    if dim == 2:
        th = 0.1234567 + 2 * np.pi * np.arange(n) / n
        return np.c_[np.cos(th), np.sin(th)]
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    r = np.sqrt(1 - z ** 2)
    ph = k * _GOLDEN_ANGLE
    return np.c_[r * np.cos(ph), r * np.sin(ph), z]


@dataclass
class SteinerResult:
    point: np.ndarray
    error: float
    n_nodes: int


def _steiner_error(dim, pts_full, pts_half_fn, n):
    if dim == 1:
        return 0.0
    if dim == 2:
        return np.linalg.norm(pts_full.mean(axis=-2) - pts_full[..., ::2, :].mean(axis=-2), axis=-1)
    return np.linalg.norm(pts_full.mean(axis=-2) - pts_half_fn().mean(axis=-2), axis=-1)


def steiner(J, budget=2 ** 14, rel_tol=1e-2, full=False):
    """Steiner point ``S_m(J)``: ball average of ``pr(∂σ_J(p))``.

    The integrand depends on ``p`` only through ``p / |p|``, so the ball
    average is computed as a sphere average over :func:`sphere_directions`.
    The quadrature error is estimated against the half-budget rule; the
    result is finally projected onto ``J`` so membership holds exactly.
    """
    if isinstance(J, Polytope) and len(J.vertices) == 1:
        res = SteinerResult(J.vertices[0].copy(), 0.0, 1)
        return res if full else res.point
    dirs = sphere_directions(J.dim, budget)
    pts = J.support_points(dirs)
    err = float(_steiner_error(J.dim, pts, lambda: J.support_points(
        sphere_directions(J.dim, max(budget // 2, 1))), budget))
    if err > rel_tol * max(1.0, J.bounding_radius):
        raise NumericalFailure(f"Steiner quadrature error {err:.3g} above tolerance")
    point = J.project(pts.mean(axis=0))
    res = SteinerResult(point, err, len(dirs))
    return res if full else res.point


def steiner_of_caps(base, centers, radii, budget=1024, rel_tol=1e-2):
    """Steiner points of ``base ∩ B(c_i, r_i)`` for many balls at once.

    Returns ``(points, errors)``; each point is projected onto its own body.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    radii = np.asarray(radii, dtype=float).reshape(-1)
    nb, m = centers.shape
    dirs = sphere_directions(m, budget)
    nd = len(dirs)

    def run(dd):
        k = len(dd)
        if _exact_cap_ok(base):
            return np.stack([_cap_support_exact(base, dd, c, r) for c, r in zip(centers, radii)])
        d = np.tile(dd, (nb, 1))
        c = np.repeat(centers, k, axis=0)
        r = np.repeat(radii, k)
        return _ball_cap_support(base, d, c, r).reshape(nb, k, m)

    pts = run(dirs)
    err = _steiner_error(m, pts, lambda: run(sphere_directions(m, max(budget // 2, 1))), nd)
    err = np.broadcast_to(np.asarray(err, dtype=float), (nb,)).copy()
    scale = np.maximum(1.0, np.linalg.norm(centers, axis=1) + radii)
    if np.any(err > rel_tol * scale):
        raise NumericalFailure(f"Steiner quadrature error {err.max():.3g} above tolerance")
    mean = pts.mean(axis=1)
    return _ball_cap_project(base, mean, centers, radii), err


# --------------------------------------------------------------------------
# cones


@dataclass
class Cone:
    """Polyhedral cone of nonnegative combinations of unit generators."""

    dim: int
    generators: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))

    def __post_init__(self):
        g = np.asarray(self.generators, dtype=float).reshape(-1, self.dim)
        if len(g):
            g = g / np.linalg.norm(g, axis=1, keepdims=True)
        self.generators = g

    @property
    def is_trivial(self):
        return len(self.generators) == 0

    def contains(self, p, tol=1e-9):
        p = np.asarray(p, dtype=float).reshape(self.dim)
        if self.is_trivial:
            return bool(np.linalg.norm(p) <= tol)
        _, res = nnls(self.generators.T, p)
        return bool(res <= tol * max(1.0, np.linalg.norm(p)))

    def sample(self, levels=4):
        """Unit vectors in the cone: normalized simplex-grid combinations."""
        g = self.generators
        if len(g) <= 1:
            return g.copy()
        out = []
        for i in range(len(g)):
            for j in range(i + 1, len(g)):
                for s in np.linspace(0, 1, levels + 1):
                    v = (1 - s) * g[i] + s * g[j]
                    nv = np.linalg.norm(v)
                    if nv > 1e-12:
                        out.append(v / nv)
        return _unique_rows(np.array(out))


def _unique_rows(a, decimals=10):
    if len(a) == 0:
        return a
    _, idx = np.unique(np.round(a, decimals), axis=0, return_index=True)
    return a[np.sort(idx)]


def normal_cone(D, x, tol=1e-9):
    """Normal cone of a polytope ``D`` at ``x in D``; ``{0}`` at interior points."""
    x = np.asarray(x, dtype=float).reshape(D.dim)
    if not D.contains(x, tol):
        raise DomainError(f"point {x} is not in the set")
    if not D.full_dimensional:
        # the orthogonal complement of the affine hull is part of every normal cone
        comp = D._comp if D.rank > 0 else np.eye(D.dim)
        gens = [comp.T, -comp.T]
        if D.rank > 0:
            local = (x - D._origin) @ D._basis
            sub = normal_cone(D._sub, local, tol)
            if not sub.is_trivial:
                gens.append(sub.generators @ D._basis.T)
        return Cone(D.dim, np.concatenate(gens))
    a, b = D.halfspaces()
    active = np.abs(a @ x - b) <= tol * (1.0 + D.bounding_radius)
    return Cone(D.dim, a[active])


def boundary_normals(omega, x, r, levels=4):
    """Sample of ``N^r_Ω(x)``: unit normals at boundary points within ``r`` of x.

    Convex combinations of the generators are formed first and normalized
    afterwards.
    """
    x = np.asarray(x, dtype=float).reshape(omega.dim)
    a, b = omega.halfspaces()
    facets = omega.facets()
    out = []
    for k in range(len(a)):
        # distance from x to the facet (as a segment/triangle/point)
        if omega.dim == 1:
            near = abs(x[0] - facets[k, 0, 0]) <= r
        else:
            fac = Polytope(_facet_for_normal(omega, a[k], b[k]))
            near = fac.distance(x) <= r
        if near:
            out.append(a[k])
    for v in omega.vertices:
        if np.linalg.norm(v - x) <= r:
            out.extend(normal_cone(omega, v).sample(levels))
    if not out:
        return np.zeros((0, omega.dim))
    return _unique_rows(np.array(out))


def _facet_for_normal(omega, a, b):
    v = omega.vertices
    on = np.abs(v @ a - b) <= 1e-9 * (1.0 + omega.bounding_radius)
    return v[on]


def contingent_directions(D, x, n=64, seed=0):
    """Sampled directions ``y - x`` with ``y in D`` (a subset of ``T_D(x)``)."""
    rng = np.random.default_rng(seed)
    v = D.vertices
    w = rng.dirichlet(np.ones(len(v)), size=n)
    return np.concatenate([v - x, w @ v - x])
