"""Parametrization of a convex Hamiltonian by dynamics and running cost.

For every ``(t, x)`` the epigraph ``Ep`` of ``q -> H*(t, x, q)`` is a closed
convex set in R^(n+1).  The map

    phi(t, x, u) = steiner(P(eta(t, x) u, Ep(t, x))) = (f(t, x, u), l(t, x, u))

selects a point of the epigraph for every control ``u`` in the unit ball, and

    H(t, x, p) = sup_{|u| <= 1} <p, f(t, x, u)> - l(t, x, u).

This module evaluates ``phi`` and checks every property of the construction
on samples.
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import ndtri
from scipy.stats import qmc

from .errors import DomainError
from .fenchel import check_H12, check_H13, conjugate_data, interpolate
from .geometry import Polytope, sphere_directions, steiner_of_caps

EP_TOL = 1e-9


@dataclass
class Tolerances:
    ep: float = EP_TOL
    cover: float = 0.05
    lipschitz_slack: float = 0.1
    identity_factor: float = 5.0
    scale: float = 1.0


@dataclass
class EpigraphData:
    body: Polytope
    cap: float


@dataclass
class CheckResult:
    """Outcome of one verification with the tolerance it was judged against."""

    name: str
    value: float
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self):
        d = {"name": self.name, "value": self.value, "tolerance": self.tolerance,
             "passed": self.passed}
        d.update(self.details)
        return d


def _ball_points(m, n, seed):
    """Scrambled Sobol points mapped to the closed unit ball of R^m."""
    k = int(np.ceil(np.log2(max(n, 2))))
    z = qmc.Sobol(m + 1, scramble=True, seed=seed).random_base2(k)[:n]
    if m == 1:
        return 2 * z[:, :1] - 1
    # Gaussian directions from the first m coordinates, radius from the last
    v = ndtri(np.clip(z[:, :m], 1e-12, 1 - 1e-12))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * z[:, m:m + 1] ** (1.0 / m)


class Representation:
    """Evaluator of ``phi(t, x, u) = (f, l)`` for a Hamiltonian.

    Parameters
    ----------
    H : HamiltonianSpec
        Must be convex in p.
    qaxes : tuple of Axis
        Dual grid on which conjugates are computed.
    eta_mode : {"graph", "analytic", "prop"}
        Scaling rule.  ``"graph"`` uses the norm of the graph of H* (1 when
        the graph is the origin); the other two use analytic upper bounds.
    u_max : float
        Largest admissible control norm.
    steiner_budget : int
        Quadrature directions per Steiner point.
    envelopes : dict, optional
        Callables of t; ``c_tilde`` and ``C_r`` are used when present,
        otherwise they are estimated from samples.
    """

    def __init__(self, H, qaxes, eta_mode="graph", u_max=1.5, steiner_budget=1024,
                 envelopes=None, tolerances=None, conj_radius=2.0):
        if eta_mode not in ("graph", "analytic", "prop"):
            raise ValueError(f"unknown eta mode {eta_mode!r}")
        self.H = H
        self.n = H.n
        self.u_dim = H.n + 1
        self.qaxes = tuple(qaxes)
        self.eta_mode = eta_mode
        self.u_max = float(u_max)
        self.steiner_budget = int(steiner_budget)
        self.envelopes = dict(envelopes or {})
        self.tol = tolerances or Tolerances()
        self.conj_radius = conj_radius
        self._conj = {}
        self._epi = {}
        self._consts = {}
        self._lock = threading.Lock()
        self.steiner_error = 0.0

    # -- cached per-node data ------------------------------------------------

    @staticmethod
    def _key(t, x):
        return (round(float(t), 12),) + tuple(np.round(np.atleast_1d(x).astype(float), 12))

    def conj(self, t, x):
        key = self._key(t, x)
        cd = self._conj.get(key)
        if cd is None:
            cd = conjugate_data(self.H, t, np.atleast_1d(x), self.qaxes)
            with self._lock:
                cd = self._conj.setdefault(key, cd)
        return cd

    def constants(self, t, r=None):
        """``(c_tilde(t), C_r(t))`` from declared envelopes or from samples."""
        r = self.conj_radius if r is None else r
        key = (round(float(t), 12), float(r))
        if key not in self._consts:
            ct = self.envelopes.get("c_tilde")
            cr = self.envelopes.get("C_r")
            ct = ct(t) if ct else check_H13(self.H, t, xradius=r).value
            cr = cr(t) if cr else check_H12(self.H, t, r).value
            with self._lock:
                self._consts[key] = (float(ct), float(cr))
        return self._consts[key]

    def eta(self, t, x):
        cd = self.conj(t, x)
        if self.eta_mode == "graph":
            return cd.graph_norm if cd.graph_norm > 0 else 1.0
        x = np.atleast_1d(np.asarray(x, dtype=float))
        ct, cr = self.constants(t)
        h0 = abs(self.H.eval(t, x, np.zeros((1, self.n)))[0])
        if self.eta_mode == "analytic":
            val = ct * (1 + np.linalg.norm(x)) + cd.gamma + h0
        else:
            hz = abs(self.H.eval(t, np.zeros(self.n), np.zeros((1, self.n)))[0])
            val = (ct + cr) * (1 + np.linalg.norm(x)) + hz + cd.gamma
        return float(val) if val > 0 else 1.0

    def epigraph(self, t, x):
        """Epigraph of H* cut at a height no ball ``P(eta u, Ep)`` can reach."""
        key = self._key(t, x) + (self.u_max,)
        ep = self._epi.get(key)
        if ep is None:
            cd = self.conj(t, x)
            g = cd.graph_points
            eta = self.eta(t, x)
            cap = g[:, -1].max() + 3 * (eta * self.u_max + cd.graph_norm) + 1.0
            top = g.copy()
            top[:, -1] = cap
            ep = EpigraphData(Polytope(np.concatenate([g, top])), float(cap))
            with self._lock:
                ep = self._epi.setdefault(key, ep)
        return ep

    # -- evaluation ------------------------------------------------------------

    def phi(self, t, x, u):
        """``(f, l)`` for controls ``u`` of shape (N, n+1) or (n+1,)."""
        u = np.asarray(u, dtype=float)
        single = u.ndim == 1
        U = u.reshape(-1, self.u_dim)
        if np.any(np.linalg.norm(U, axis=1) > self.u_max * (1 + 1e-12)):
            raise DomainError(f"control norm exceeds u_max = {self.u_max}")
        ep = self.epigraph(t, x).body
        c = self.eta(t, x) * U
        proj = ep.project(c)
        d = np.linalg.norm(c - proj, axis=1)
        out = c.copy()
        move = d > self.tol.ep * (1.0 + np.linalg.norm(c, axis=1))
        if np.any(move):
            pts, err = steiner_of_caps(ep, c[move], 2 * d[move], budget=self.steiner_budget)
            out[move] = pts
            self.steiner_error = max(self.steiner_error, float(err.max()))
        f, ell = out[:, :self.n], out[:, self.n]
        return (f[0], float(ell[0])) if single else (f, ell)

    def phi_graph(self, t, x, q=None):
        """Controls aimed at graph points and their images.

        Returns ``(U, f, l)`` with ``U = (q, H*(q)) / eta``.  Each ``eta U``
        lies in the epigraph, so ``phi`` fixes it; the membership test in
        :meth:`phi` confirms this without running the quadrature.
        """
        cd = self.conj(t, x)
        g = cd.graph_points if q is None else np.c_[q, cd.hstar_at(q)]
        U = g / self.eta(t, x)
        f, ell = self.phi(t, x, U)
        return U, f, ell

    def u_samples(self, t, x, n=512, seed=0):
        """Controls in the closed unit ball used by the verifications.

        A quarter are low-discrepancy interior points, a quarter lie on the
        unit sphere and the rest point at graph samples of H* (the epigraph's
        lower hull vertices are always included).
        """
        m = self.u_dim
        n_in = n // 4
        n_sh = n // 4
        inner = _ball_points(m, n_in, seed)
        shell = sphere_directions(m, n_sh)
        cd = self.conj(t, x)
        g = cd.graph_points
        eta = self.eta(t, x)
        k = n - n_in - len(shell)
        ep = self.epigraph(t, x)
        verts = ep.body.vertices
        lower = verts[verts[:, -1] < ep.cap - 1e-9]
        idx = np.unique(np.linspace(0, len(g) - 1, max(k - len(lower), 1)).round().astype(int))
        graph = np.concatenate([lower, g[idx]])[:k] / eta
        out = np.concatenate([inner, shell, graph])
        if len(out) < n:
            # few distinct graph samples: top up with interior points
            out = np.concatenate([out, _ball_points(m, n - len(out), seed + 1)])
        return out

    def tolerance_identity(self, t=None, x=None):
        h = max(a.step for a in self.qaxes)
        return self.tol.scale * self.tol.identity_factor * (h + self.steiner_error + self.tol.ep)

    # -- verifications ---------------------------------------------------------

    def sup_over_controls(self, t, x, p, U):
        f, ell = self.phi(t, x, U)
        p = np.atleast_2d(np.asarray(p, dtype=float)).reshape(-1, self.n)
        vals = p @ f.T - ell[None, :]
        return vals.max(axis=1), vals

    def verify_identity(self, t, x, p_samples, u_samples=None, radii=(1.0,)):
        """Residual of ``H(p) - sup_u (<p, f> - l)`` over momentum samples.

        ``radii`` > 1 probe the unrestricted form on an expanding sequence of
        control balls (used when the slope bound fails).
        """
        U0 = self.u_samples(t, x) if u_samples is None else np.asarray(u_samples, dtype=float)
        p = np.atleast_2d(np.asarray(p_samples, dtype=float)).reshape(-1, self.n)
        Hp = self.H.eval(t, np.atleast_1d(x), p)
        per_radius = {}
        old_umax = self.u_max
        try:
            self.u_max = max(old_umax, max(radii))
            best = np.full(len(p), -np.inf)
            all_vals = []
            for R in radii:
                # the balls are nested, so the sup runs over every radius so far
                sup, vals = self.sup_over_controls(t, x, p, U0 * R)
                best = np.maximum(best, sup)
                all_vals.append(vals)
                per_radius[float(R)] = (Hp - best, np.concatenate(all_vals, axis=1))
        finally:
            self.u_max = old_umax
        res, vals = per_radius[float(radii[-1])]
        overshoot = float(np.max(vals - Hp[:, None]))
        tol = self.tolerance_identity()
        worst = float(np.max(np.abs(res)))
        return CheckResult(
            "identity", worst, tol, worst <= tol and overshoot <= tol,
            {"max_overshoot": overshoot, "n_p": len(p), "n_u": len(U0),
             "residual_by_radius": {R: float(np.max(np.abs(r))) for R, (r, _) in per_radius.items()}})

    def verify_domain_cover(self, t, x, u_samples=None, density=2001):
        """Hausdorff distance between the velocity set and ``{f(u)}``."""
        U = self.u_samples(t, x) if u_samples is None else u_samples
        f, _ = self.phi(t, x, U)
        D = self.conj(t, x).domain
        if self.n == 1:
            lo, hi = D.vertices.min(), D.vertices.max()
            dense = np.linspace(lo, hi, density)[:, None] if hi > lo else D.vertices
        else:
            lo, hi = D.vertices.min(axis=0), D.vertices.max(axis=0)
            side = int(np.sqrt(density))
            mesh = np.meshgrid(*[np.linspace(a, b, side) for a, b in zip(lo, hi)], indexing="ij")
            dense = np.stack([m_.ravel() for m_ in mesh], axis=1)
            dense = np.concatenate([dense[D.contains(dense)], D.vertices])
        e1 = float(cKDTree(f).query(dense)[0].max())
        e2 = float(np.max(D.distance(f)))
        val = max(e1, e2)
        tol = self.tol.cover * self.tol.scale
        return CheckResult("domain_cover", val, tol, val <= tol,
                           {"excess_domain_over_f": e1, "excess_f_over_domain": e2})

    def verify_graph_cover(self, t, x, q_samples=None):
        """Largest ``|phi((q, H*(q)) / eta) - (q, H*(q))|`` over q in the domain."""
        cd = self.conj(t, x)
        if q_samples is None:
            q = cd.graph_points[:, :-1]
        else:
            q = np.asarray(q_samples, dtype=float).reshape(-1, self.n)
            inside = cd.domain.contains(q)
            if not np.all(inside):
                warnings.warn(f"{int((~inside).sum())} q samples outside the domain skipped")
            q = q[inside]
        target = np.c_[q, cd.hstar_at(q)]
        eta = self.eta(t, x)
        U = target / eta
        f, ell = self.phi(t, x, U)
        err = float(np.max(np.linalg.norm(np.c_[f, ell] - target, axis=1))) if len(q) else 0.0
        in_ball = float(np.max(np.linalg.norm(U, axis=1))) if len(q) else 0.0
        tol = self.tolerance_identity()
        return CheckResult("graph_cover", err, tol, err <= tol and in_ball <= 1 + 1e-9,
                           {"max_control_norm": in_ball, "n_q": len(q)})

    def verify_lipschitz(self, t, r, n_pairs=500, seed=0, n_nodes=21):
        """Largest ratio ``|phi(x,u) - phi(y,v)| / (C_r |x-y| + |eta_x u - eta_y v|)``.

        States are drawn from ``n_nodes`` cached points per axis of [-r, r]
        intersected with the ball of radius r; controls from the unit ball.
        """
        rng = np.random.default_rng(seed)
        axis = np.linspace(-r, r, n_nodes)
        mesh = np.meshgrid(*[axis] * self.n, indexing="ij")
        nodes = np.stack([m_.ravel() for m_ in mesh], axis=1)
        nodes = nodes[np.linalg.norm(nodes, axis=1) <= r + 1e-12]
        _, cr = self.constants(t, r)
        xi = rng.integers(len(nodes), size=n_pairs)
        yi = np.where(rng.uniform(size=n_pairs) < 0.3, xi, rng.integers(len(nodes), size=n_pairs))
        U = _ball_points(self.u_dim, n_pairs, seed + 1)
        V = np.where(rng.uniform(size=(n_pairs, 1)) < 0.5,
                     U + 0.05 * _ball_points(self.u_dim, n_pairs, seed + 2),
                     rng.permutation(U))
        V /= np.maximum(1.0, np.linalg.norm(V, axis=1, keepdims=True))
        vals_u = np.zeros((n_pairs, self.u_dim))
        vals_v = np.zeros((n_pairs, self.u_dim))
        for k in np.unique(np.r_[xi, yi]):
            a = xi == k
            if np.any(a):
                f, l = self.phi(t, nodes[k], U[a])
                vals_u[a] = np.c_[f, l]
            b = yi == k
            if np.any(b):
                f, l = self.phi(t, nodes[k], V[b])
                vals_v[b] = np.c_[f, l]
        eta_x = np.array([self.eta(t, nodes[k]) for k in xi])
        eta_y = np.array([self.eta(t, nodes[k]) for k in yi])
        num = np.linalg.norm(vals_u - vals_v, axis=1)
        den = cr * np.linalg.norm(nodes[xi] - nodes[yi], axis=1) + np.linalg.norm(
            eta_x[:, None] * U - eta_y[:, None] * V, axis=1)
        ok = den > 1e-9
        ratio = float(np.max(num[ok] / den[ok])) if np.any(ok) else 0.0
        bound = 5 * self.u_dim + self.tol.lipschitz_slack * self.tol.scale
        return CheckResult("lipschitz", ratio, bound, ratio <= bound,
                           {"C_r": cr, "pairs_used": int(ok.sum()), "pairs_skipped": int((~ok).sum())})

    def excess_bound(self, t, x):
        """Upper bound for ``l - H*(f)`` built from the slope constants.

        ``10 m (c~ + C_r)(1 + |x|) + |H(t, 0, 0)| + gamma``; when the graph
        of H* is the origin the scaling falls back to 1 and the bound gains
        ``5 m eta``.
        """
        m = self.u_dim
        x = np.atleast_1d(np.asarray(x, dtype=float))
        ct, cr = self.constants(t)
        cd = self.conj(t, x)
        h00 = abs(self.H.eval(t, np.zeros(self.n), np.zeros((1, self.n)))[0])
        b = 10 * m * (ct + cr) * (1 + np.linalg.norm(x)) + h00 + cd.gamma
        if cd.graph_norm == 0:
            b += 5 * m * self.eta(t, x)
        return float(b)

    def verify_excess_bound(self, t, x, u_samples=None):
        U = self.u_samples(t, x) if u_samples is None else u_samples
        f, ell = self.phi(t, x, U)
        cd = self.conj(t, x)
        hs = cd.hstar_at(f.reshape(-1, self.n))
        excess = float(np.max(ell - hs))
        bound = self.excess_bound(t, x)
        return CheckResult("excess_bound", excess, bound, excess <= bound * self.tol.scale + 1e-9,
                           {"min_excess": float(np.min(ell - hs))})

    def verify_membership(self, t, x, u_samples=None):
        """Largest ``H*(f) - l`` (must not exceed the epigraph tolerance)."""
        U = self.u_samples(t, x) if u_samples is None else u_samples
        f, ell = self.phi(t, x, U)
        hs = interpolate(self.conj(t, x).hstar, f.reshape(-1, self.n))
        gap = float(np.max(hs - ell))
        tol = self.tolerance_identity()
        return CheckResult("membership", gap, tol, gap <= tol)

    def dump_rows(self, t, x, U):
        f, ell = self.phi(t, x, U)
        x = np.atleast_1d(x)
        return [[t, *x, *u, *fi, li] for u, fi, li in zip(U, f.reshape(len(U), -1), ell)]
