"""State-constrained infinite-horizon HJB problems on grids.

The horizon is truncated at ``T`` and the value function is computed by a
backward semi-Lagrangian recursion

    V(t_k, x) = min_u  dt * l(t_k, x, u) + V(t_{k+1}, x + dt f(t_k, x, u)),

with ``V(T, .) = 0``.  Steps that leave the constraint set are forbidden.
The recursion runs either over controls of a :class:`Representation`
(:func:`solve_v`) or directly over velocities with cost ``H*``
(:func:`solve_W`).  The remaining functions check the discrete value
function against the HJB equation in its subdifferential form.
"""

from __future__ import annotations

import csv
import io
import time as _time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .errors import ConfigError
from .fenchel import (CheckReport, GridFunction, check_H11, check_H25_H26,
                      conjugate_values_batch, interpolate)
from .geometry import Polytope, boundary_normals

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ASSUMPTION = 2
EXIT_VERIFICATION = 3

KAPPA = 5.0
SIGMA = 2.0
STENCIL = 3
RHO = 0.02
EQ_FACTOR = 2.0


@dataclass
class ValueGrid:
    """Value function samples on a (t, x) product grid.

    ``values`` has shape ``(nt, *xcounts)``; ``+inf`` marks states from which
    no admissible trajectory exists (or states outside the constraint set).
    """

    tnodes: np.ndarray
    xaxes: tuple
    values: np.ndarray
    mask: np.ndarray
    tail_bound: float
    kind: str = "v"
    timing: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def dt(self):
        return float(self.tnodes[1] - self.tnodes[0])

    @property
    def dx(self):
        return max(a.step for a in self.xaxes)

    def xnodes(self):
        mesh = np.meshgrid(*[a.nodes for a in self.xaxes], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def slice(self, k):
        return GridFunction(self.xaxes, self.values[k], self.kind)

    def copy_with(self, values, kind):
        return ValueGrid(self.tnodes, self.xaxes, np.asarray(values, dtype=float), self.mask,
                         self.tail_bound, kind, 0.0, dict(self.info))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = len(self.xaxes)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(n)] + ["value"])
        X = self.xnodes()
        for k, t in enumerate(self.tnodes):
            for x, v in zip(X, self.values[k].ravel()):
                w.writerow([f"{t:.12g}"] + [f"{c:.12g}" for c in x] + [f"{v:.12g}"])
        return buf.getvalue()


def from_function(problem, fn, kind="closed-form", tail=0.0):
    """Sample ``fn(t, X) -> values`` (X of shape (N, n)) on the problem grids."""
    t = problem.tgrid.nodes
    X = problem.xnodes()
    mask = problem.omega.contains(X).reshape([a.count for a in problem.xaxes])
    vals = np.stack([np.broadcast_to(np.asarray(fn(tk, X), dtype=float), (len(X),)).reshape(mask.shape)
                     for tk in t])
    vals = np.where(mask[None], vals, np.inf)
    return ValueGrid(t, problem.xaxes, vals, mask, tail, kind)


# --------------------------------------------------------------------------
# truncation


def tail_bound(problem, no_tail_bound=False):
    """``int_T^inf max(|phi(s)|, phi_tilde(s)(1 + R)) ds`` from the cost envelopes.

    ``R`` is the largest norm of a point of the constraint set.  Raises
    ConfigError when the envelopes are missing, unless ``no_tail_bound``
    (the bound is then reported as NaN).
    """
    phi = problem.envelope("phi")
    phit = problem.envelope("phi_tilde")
    if phi is None or phit is None:
        if no_tail_bound:
            return float("nan")
        raise ConfigError("cost envelopes phi and phi_tilde are needed for the tail bound "
                          "(or pass --no-tail-bound)")
    R = problem.omega_radius
    val, err = quad(lambda s: max(abs(phi(s)), phit(s) * (1 + R)), problem.tgrid.T, np.inf,
                    limit=200)
    return float(val + err)


# --------------------------------------------------------------------------
# dynamic programming


def _step(Vnext, xaxes, X, F, L, omega, dt):
    """One backward step; F: (Nx, Nc, n), L: (Nx, Nc) with +inf for unused controls."""
    nx, nc, n = F.shape
    Y = (X[:, None, :] + dt * F).reshape(-1, n)
    ok = np.isfinite(L).ravel()
    ok &= omega.contains(Y)
    vals = np.full(len(Y), np.inf)
    if np.any(ok):
        vals[ok] = interpolate(GridFunction(xaxes, Vnext, "v"), Y[ok])
    cand = dt * np.where(np.isfinite(L), L, 0.0).ravel() + vals
    cand[~ok] = np.inf
    cand = cand.reshape(nx, nc)
    best = np.argmin(cand, axis=1)
    return cand[np.arange(nx), best], best


class ControlTable:
    """Per-time controls ``(f, l)`` at every state node.

    ``graph`` controls point at the graph samples of H* on the dual grid.
    Their images under the representation are the graph points themselves,
    since each lies in the epigraph.  ``velocity`` controls form a uniform
    grid of ``nvel`` points per axis over the velocity set, costed by the
    interpolated H*.
    """

    def __init__(self, problem, rep=None, mode="graph", nvel=51, generic=0, seed=0):
        self.problem = problem
        self.rep = rep
        self.mode = mode
        self.nvel = nvel
        self.generic = generic
        self.seed = seed
        self.X = problem.xnodes()
        self.qaxes = problem.qaxes
        self.qgrid = GridFunction(self.qaxes, np.zeros([a.count for a in self.qaxes])).points()
        self.fixed_point_checks = 0

    def hstar(self, t):
        return conjugate_values_batch(self.problem.hamiltonian, t, self.X, self.qaxes)

    def at(self, t):
        hs = self.hstar(t).reshape(len(self.X), -1)
        n = self.problem.n
        if self.mode == "graph":
            F = np.broadcast_to(self.qgrid, (len(self.X),) + self.qgrid.shape)
            L = hs
            if self.rep is not None:
                F, L = self._through_representation(t, F, L)
            if self.generic:
                F, L = self._with_generic(t, F, L)
            return np.array(F), np.array(L)
        # velocity mode: uniform grid over the hull of finite nodes
        if n == 1:
            return self._velocity_1d(hs)
        Fs, Ls = [], []
        for i in range(len(self.X)):
            fin = np.isfinite(hs[i])
            q = self.qgrid[fin]
            lo, hi = q.min(axis=0), q.max(axis=0)
            axes = [np.linspace(lo[k], hi[k], self.nvel) for k in range(n)]
            mesh = np.meshgrid(*axes, indexing="ij")
            V = np.stack([m.ravel() for m in mesh], axis=1)
            g = GridFunction(self.qaxes, hs[i].reshape([a.count for a in self.qaxes]))
            Fs.append(V)
            Ls.append(interpolate(g, V))
        return np.stack(Fs), np.stack(Ls)

    def _velocity_1d(self, hs):
        q = self.qgrid[:, 0]
        fin = np.isfinite(hs)
        lo = np.where(fin, q[None], np.inf).min(axis=1)
        hi = np.where(fin, q[None], -np.inf).max(axis=1)
        s = np.linspace(0.0, 1.0, self.nvel)
        V = lo[:, None] + (hi - lo)[:, None] * s[None]
        # row-wise linear interpolation of H* at the velocities
        h = (q[-1] - q[0]) / (len(q) - 1)
        pos = (V - q[0]) / h
        pos = np.where(np.abs(pos - np.round(pos)) < 1e-9, np.round(pos), pos)
        i0 = np.clip(np.floor(pos).astype(int), 0, len(q) - 2)
        w = pos - i0
        rows = np.arange(len(hs))[:, None]
        a, b = hs[rows, i0], hs[rows, i0 + 1]
        L = np.where(w > 0, (1 - w) * a + w * np.where(np.isfinite(b), b, 0.0), a)
        L = np.where((w > 0) & ~np.isfinite(b), np.inf, L)
        return V[..., None], L

    def _through_representation(self, t, F, L):
        """Map graph controls ``u = (q, H*(q)) / eta`` through the representation.

        Membership of ``eta u`` in the epigraph makes the image equal to
        ``eta u``; the test is done against the interpolated conjugate, which
        is the lower boundary of the epigraph body.
        """
        F = np.array(F)
        L = np.array(L)
        fin = np.isfinite(L)
        # eta u = (q, H*(q)) for graph controls: check epigraph membership
        target = np.where(fin, L, 0.0)
        for i in range(len(self.X)):
            g = GridFunction(self.qaxes, np.where(fin[i], L[i], np.inf).reshape(
                [a.count for a in self.qaxes]))
            hs_f = interpolate(g, F[i][fin[i]])
            if np.any(hs_f > target[i][fin[i]] + 1e-9 * (1 + np.abs(hs_f))):
                raise AssertionError("graph control left the epigraph")
        self.fixed_point_checks += int(fin.sum())
        return F, L

    def _with_generic(self, t, F, L):
        rep = self.rep
        extraF, extraL = [], []
        for x in self.X:
            U = rep.u_samples(t, x, n=max(self.generic, 4), seed=self.seed)[:self.generic]
            f, ell = rep.phi(t, x, U)
            extraF.append(f.reshape(len(U), -1))
            extraL.append(ell)
        return np.concatenate([F, np.stack(extraF)], axis=1), np.concatenate([L, np.stack(extraL)], axis=1)


def _solve(problem, table, kind, no_tail_bound=False):
    start = _time.perf_counter()
    tn = problem.tgrid.nodes
    dt = problem.tgrid.step
    X = problem.xnodes()
    shape = [a.count for a in problem.xaxes]
    mask = problem.omega.contains(X)
    V = np.full((len(tn), len(X)), np.inf)
    V[-1, mask] = 0.0
    tail = tail_bound(problem, no_tail_bound)
    max_speed = 0.0
    for k in range(len(tn) - 2, -1, -1):
        F, L = table.at(tn[k])
        speeds = np.linalg.norm(F, axis=-1)[np.isfinite(L)]
        if speeds.size:
            max_speed = max(max_speed, float(speeds.max()))
        vals, _ = _step(V[k + 1].reshape(shape), problem.xaxes, X, F, L, problem.omega, dt)
        V[k] = np.where(mask, vals, np.inf)
    if max_speed * dt > problem.dx * (1 + 1e-9):
        warnings.warn(f"time step {dt} exceeds dx / max|f| = {problem.dx / max_speed:.4g}")
    return ValueGrid(tn, problem.xaxes, V.reshape([len(tn)] + shape), mask.reshape(shape), tail,
                     kind, _time.perf_counter() - start, {"max_speed": max_speed})


def solve_v(problem, rep=None, generic=None, no_tail_bound=False):
    """Value function of the control system given by the representation."""
    generic = problem.ugrid.get("generic", 0) if generic is None else generic
    table = ControlTable(problem, rep, "graph", generic=generic)
    vg = _solve(problem, table, "v", no_tail_bound)
    vg.info["fixed_point_checks"] = table.fixed_point_checks
    return vg


def solve_W(problem, nvel=51, no_tail_bound=False):
    """Calculus-of-variations value ``inf int H*(s, xi, xi') ds`` on the grids."""
    return _solve(problem, ControlTable(problem, None, "velocity", nvel=nvel), "W", no_tail_bound)


def dpp_residual(V, problem, rep=None, n_samples=200, seed=0):
    """Largest gap between stored values and a recomputed backward step."""
    rng = np.random.default_rng(seed)
    table = ControlTable(problem, rep, "graph")
    X = V.xnodes()
    ks = rng.integers(0, len(V.tnodes) - 1, size=max(1, n_samples // 20))
    worst = 0.0
    for k in np.unique(ks):
        F, L = table.at(V.tnodes[k])
        vals, _ = _step(V.values[k + 1], V.xaxes, X, F, L, problem.omega, V.dt)
        stored = V.values[k].reshape(-1)
        both = np.isfinite(vals) & np.isfinite(stored)
        if np.any(np.isfinite(vals) != np.isfinite(stored)):
            return float("inf")
        if np.any(both):
            worst = max(worst, float(np.max(np.abs(vals[both] - stored[both]))))
    return worst


# --------------------------------------------------------------------------
# subdifferentials and the weak-solution test


def _grid_values(V):
    """Values reshaped to (nt, N) with per-axis steps (dt, dx1, ...)."""
    steps = [V.dt] + [a.step for a in V.xaxes]
    return V.values, np.array(steps)


def _stencil_offsets(ndim, k):
    rng = np.arange(-k, k + 1)
    mesh = np.meshgrid(*[rng] * ndim, indexing="ij")
    off = np.stack([m.ravel() for m in mesh], axis=1)
    return off[np.any(off != 0, axis=1)]


def _candidates(vals, steps, idx, k, eps, boundary_dirs, ncand):
    """Candidate gradients for one node from one-sided quotients per axis."""
    ndim = vals.ndim
    ranges = []
    for a in range(ndim):
        qs = []
        for j in list(range(-k, 0)) + list(range(1, k + 1)):
            nb = list(idx)
            nb[a] += j
            if 0 <= nb[a] < vals.shape[a] and np.isfinite(vals[tuple(nb)]):
                qs.append((vals[tuple(nb)] - vals[idx]) / (j * steps[a]))
        if not qs:
            return None
        lo, hi = min(qs) - eps, max(qs) + eps
        ext = boundary_dirs[a]
        span = hi - lo + 1.0
        # boundary nodes: the subdifferential contains a normal-cone ray
        if ext > 0:
            hi += 2 * span
        elif ext < 0:
            lo -= 2 * span
        ranges.append(np.linspace(lo, hi, ncand))
    mesh = np.meshgrid(*ranges, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def numeric_subdifferential(V, t_idx, x_idx, k=STENCIL, sigma=SIGMA, ncand=9, omega=None):
    """Accepted Frechet subgradient candidates ``(p_t, p_x)`` at a node.

    A candidate p is kept when every finite stencil node y within ``k``
    cells satisfies ``V(y) >= V(z) + <p, y - z> - eps |y - z|`` with
    ``eps = sigma (dt + dx)``.  Returns an array of shape (M, 1 + n),
    possibly empty.
    """
    vals, steps = _grid_values(V)
    x_idx = tuple(np.atleast_1d(x_idx))
    idx = (int(t_idx),) + x_idx
    if not np.isfinite(vals[idx]):
        return np.zeros((0, vals.ndim))
    eps = sigma * (V.dt + V.dx)
    bdirs = [0] + _boundary_dirs(V, x_idx, omega)
    cands = _candidates(vals, steps, idx, k, eps, bdirs, ncand)
    if cands is None:
        return np.zeros((0, vals.ndim))
    off = _stencil_offsets(vals.ndim, k)
    nbr = np.array(idx)[None] + off
    inside = np.all((nbr >= 0) & (nbr < np.array(vals.shape)), axis=1)
    off, nbr = off[inside], nbr[inside]
    vn = vals[tuple(nbr.T)]
    fin = np.isfinite(vn)
    off, vn = off[fin], vn[fin]
    dy = off * steps[None]
    lhs = vn[None, :] - vals[idx]
    rhs = cands @ dy.T - eps * np.linalg.norm(dy, axis=1)[None, :]
    keep = np.all(lhs >= rhs - 1e-12, axis=1)
    return cands[keep]


def _boundary_dirs(V, x_idx, omega):
    """Per-axis outward sign (+1, -1 or 0) when the node touches the grid edge of omega."""
    out = []
    for a, (i, ax) in enumerate(zip(x_idx, V.xaxes)):
        nb_hi = list(x_idx)
        nb_lo = list(x_idx)
        nb_hi[a] = i + 1
        nb_lo[a] = i - 1
        hi_in = i + 1 < ax.count and V.mask[tuple(nb_hi)]
        lo_in = i - 1 >= 0 and V.mask[tuple(nb_lo)]
        out.append(1 if not hi_in else (-1 if not lo_in else 0))
    return out


@dataclass
class WeakSolutionReport:
    """Per-node residuals of the HJB equation on numerical subgradients."""

    residuals: np.ndarray
    boundary: np.ndarray
    tested: np.ndarray
    nodes: np.ndarray
    tolerance: float
    rho: float
    counts: np.ndarray

    @property
    def interior_pass_fraction(self):
        sel = self.tested & ~self.boundary
        return float(np.mean(self.residuals[sel] <= self.tolerance)) if np.any(sel) else 1.0

    @property
    def interior_fail_fraction(self):
        sel = self.tested & ~self.boundary
        return float(np.mean(self.residuals[sel] > self.tolerance)) if np.any(sel) else 0.0

    @property
    def boundary_pass_fraction(self):
        sel = self.tested & self.boundary
        return float(np.mean(self.residuals[sel] <= self.tolerance)) if np.any(sel) else 1.0

    @property
    def passed(self):
        return (self.interior_pass_fraction >= 1 - self.rho
                and self.boundary_pass_fraction >= 1 - self.rho)

    def violations(self, limit=20):
        bad = np.nonzero(self.tested & (self.residuals > self.tolerance))[0]
        return [{"t_idx": int(self.nodes[i, 0]), "x_idx": self.nodes[i, 1:].tolist(),
                 "residual": float(self.residuals[i]), "boundary": bool(self.boundary[i])}
                for i in bad[:limit]]

    def to_dict(self):
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "interior_pass_fraction": self.interior_pass_fraction,
            "interior_fail_fraction": self.interior_fail_fraction,
            "boundary_pass_fraction": self.boundary_pass_fraction,
            "tested_nodes": int(self.tested.sum()),
            "untested_nodes": int((~self.tested).sum()),
            "max_interior_residual": float(np.max(self.residuals[self.tested & ~self.boundary],
                                                  initial=0.0)),
            "violations": self.violations(),
        }


def check_weak_solution(V, problem, t_stride=4, x_stride=2, kappa=KAPPA, sigma=SIGMA,
                        k=STENCIL, rho=RHO, tol_scale=1.0):
    """Test ``-p_t + H(t, x, -p_x)`` on numerical subgradients.

    Interior nodes need ``|.| <= tol`` for every accepted candidate; nodes
    on the boundary of the constraint set need ``. >= -tol``.  The tolerance
    is ``kappa (dt + dx)``.  Nodes with no accepted candidate are untested.
    The verdict requires a fraction ``1 - rho`` of tested nodes to pass.
    """
    H = problem.hamiltonian
    tol = tol_scale * kappa * (V.dt + V.dx)
    nt = len(V.tnodes)
    shape = V.values.shape[1:]
    xs_idx = np.stack(np.meshgrid(*[np.arange(0, s, x_stride) for s in shape],
                                  indexing="ij"), axis=-1).reshape(-1, len(shape))
    # make sure boundary nodes are present
    edge = np.stack(np.meshgrid(*[np.array([0, s - 1]) for s in shape], indexing="ij"),
                    axis=-1).reshape(-1, len(shape))
    xs_idx = np.unique(np.concatenate([xs_idx, edge]), axis=0)
    nodes, res, bnd, tested, counts = [], [], [], [], []
    for ti in range(0, nt - 1, t_stride):
        t = V.tnodes[ti]
        for xi in xs_idx:
            xi_t = tuple(xi)
            if not V.mask[xi_t] or not np.isfinite(V.values[(ti,) + xi_t]):
                continue
            cands = numeric_subdifferential(V, ti, xi_t, k, sigma, omega=problem.omega)
            is_b = any(d != 0 for d in _boundary_dirs(V, xi_t, problem.omega))
            nodes.append((ti,) + xi_t)
            bnd.append(is_b)
            counts.append(len(cands))
            if len(cands) == 0:
                tested.append(False)
                res.append(0.0)
                continue
            x = np.array([V.xaxes[a].nodes[xi[a]] for a in range(len(xi))])
            val = -cands[:, 0] + H.eval(t, x, -cands[:, 1:])
            r = float(np.max(np.maximum(-val, 0.0))) if is_b else float(np.max(np.abs(val)))
            tested.append(True)
            res.append(r)
    return WeakSolutionReport(np.array(res), np.array(bnd, dtype=bool), np.array(tested, dtype=bool),
                              np.array(nodes), tol, rho, np.array(counts))


# --------------------------------------------------------------------------
# other checks


def check_epi_hypo_derivatives(V, problem, rep=None, hsteps=3, t_stride=8, x_stride=4,
                               tol_scale=1.0):
    """Difference-quotient tests of the contingent epi/hypo-derivative inequalities.

    Along every graph control ``(f, l)`` at interior nodes:
    ``min_h [V(t-h, x-hf) - V(t, x)] / h <= l`` and
    ``max_h [V(t+h, x+hf) - V(t, x)] / h >= -l``, for ``h = dt .. hsteps dt``.
    """
    tol = tol_scale * KAPPA * (V.dt + V.dx)
    table = ControlTable(problem, rep, "graph")
    X = V.xnodes()
    viol_epi = viol_hypo = checked = 0
    worst = 0.0
    for k in range(hsteps, len(V.tnodes) - hsteps - 1, t_stride):
        F, L = table.at(V.tnodes[k])
        sl = {j: V.slice(k + j) for j in range(-hsteps, hsteps + 1)}
        for i in range(0, len(X), x_stride):
            if not V.mask.reshape(-1)[i] or not np.isfinite(V.values[k].reshape(-1)[i]):
                continue
            v0 = V.values[k].reshape(-1)[i]
            fin = np.isfinite(L[i])
            f, ell = F[i][fin], L[i][fin]
            back, fwd = [], []
            for j in range(1, hsteps + 1):
                h = j * V.dt
                yb = X[i] - h * f
                yf = X[i] + h * f
                back.append((interpolate(sl[-j], yb) - v0) / h)
                fwd.append((interpolate(sl[j], yf) - v0) / h)
            back = np.min(np.stack(back), axis=0)
            fwd = np.max(np.stack(fwd), axis=0)
            ok_b = np.isfinite(back)
            ok_f = np.isfinite(fwd)
            e1 = back[ok_b] - ell[ok_b]
            e2 = -ell[ok_f] - fwd[ok_f]
            viol_epi += int(np.sum(e1 > tol))
            viol_hypo += int(np.sum(e2 > tol))
            worst = max(worst, float(np.max(e1, initial=0.0)), float(np.max(e2, initial=0.0)))
            checked += int(ok_b.sum() + ok_f.sum())
    passed = viol_epi + viol_hypo == 0
    return CheckReport("epi_hypo", worst, passed,
                       {"epi_violations": viol_epi, "hypo_violations": viol_hypo,
                        "checked": checked, "tolerance": tol})


def check_opc(problem, n_times=5, n_q=41, n_w=201, collar_points=11, tol=1e-9):
    """Outward pointing condition on sampled boundary collars and velocity sets.

    For sampled times, states y within ``eta`` of the boundary, and normals
    n near y, every velocity q with ``min_n <n, q> <= 0`` must admit a
    witness w in the velocity set with ``|w - q| <= M``, ``<n, w> >= r`` and
    ``<n, w - q> >= r`` for all sampled n.  Returns ``(ok, report)``; the
    report holds the first failing ``(t, y, q)`` when ``ok`` is false.
    """
    if problem.opc is None:
        raise ConfigError("problem has no opc parameters")
    eta, r, M = problem.opc["eta"], problem.opc["r"], problem.opc["M"]
    omega = problem.omega
    H = problem.hamiltonian
    A, b = omega.halfspaces()
    X = problem.xnodes()
    inside = X[omega.contains(X)]
    depth = np.min(b[None, :] - inside @ A.T, axis=1)
    collar = inside[depth <= eta + 1e-12]
    if len(collar) > collar_points * 2 ** problem.n:
        pick = np.linspace(0, len(collar) - 1, collar_points * 2 ** problem.n).round().astype(int)
        collar = collar[np.unique(pick)]
    collar = np.unique(np.concatenate([collar, omega.vertices]), axis=0)
    times = np.linspace(problem.tgrid.t0, problem.tgrid.T, n_times)
    qgrid = GridFunction(problem.qaxes, np.zeros([a.count for a in problem.qaxes])).points()
    triggered = checked = 0
    start = _time.perf_counter()
    for t in times:
        hs = conjugate_values_batch(H, t, collar, problem.qaxes).reshape(len(collar), -1)
        for y, h in zip(collar, hs):
            normals = boundary_normals(omega, y, eta)
            if len(normals) == 0:
                continue
            Q = qgrid[np.isfinite(h)]
            lo, hi = Q.min(axis=0), Q.max(axis=0)
            # dense samples of the velocity set (the hull of finite dual nodes)
            mesh = np.meshgrid(*[np.linspace(l, u, n_w if problem.n == 1 else 41)
                                 for l, u in zip(lo, hi)], indexing="ij")
            W = np.stack([m.ravel() for m in mesh], axis=1)
            if problem.n > 1:
                W = W[Polytope(Q).contains(W)]
            qs = np.stack(np.meshgrid(*[np.linspace(l, u, n_q) for l, u in zip(lo, hi)],
                                      indexing="ij"), axis=-1).reshape(-1, problem.n)
            if problem.n > 1:
                qs = qs[Polytope(Q).contains(qs)]
            trig = np.min(qs @ normals.T, axis=1) <= tol
            wn = W @ normals.T                        # (Nw, Nn)
            for q in qs[trig]:
                triggered += 1
                near = np.linalg.norm(W - q, axis=1) <= M + tol
                good = near & np.all(wn >= r - tol, axis=1) & np.all(wn - (q @ normals.T)[None] >= r - tol, axis=1)
                checked += 1
                if not np.any(good):
                    rep = {"ok": False, "t": float(t), "y": y.tolist(), "q": q.tolist(),
                           "normals": normals.tolist(), "velocity_set": [lo.tolist(), hi.tolist()],
                           "params": problem.opc, "triggered": triggered,
                           "runtime": _time.perf_counter() - start}
                    return False, rep
    return True, {"ok": True, "triggered": triggered, "checked": checked,
                  "params": problem.opc, "runtime": _time.perf_counter() - start}


def check_vanishing(V, threshold=None):
    """``sup_x |V(T - dt, x)| + tail``; vanishes when below ``threshold``."""
    row = V.values[-2]
    fin = np.isfinite(row) & V.mask
    val = float(np.max(np.abs(row[fin]), initial=0.0))
    tail = 0.0 if not np.isfinite(V.tail_bound) else V.tail_bound
    total = val + tail
    return total if threshold is None else (total, total <= threshold)


def lac_surrogate(V):
    """Sum over time steps of the sup-norm change of the finite part of V."""
    total = 0.0
    for k in range(len(V.tnodes) - 1):
        a, b = V.values[k], V.values[k + 1]
        fin = np.isfinite(a) & np.isfinite(b)
        if np.any(fin):
            total += float(np.max(np.abs(a[fin] - b[fin])))
    return total


def dom_inclusion(v, V, fraction=0.25):
    """``dom v(t, .)`` inside ``dom V(t, .)`` on the final ``fraction`` of the time grid."""
    start = int(len(v.tnodes) * (1 - fraction))
    a = np.isfinite(v.values[start:])
    b = np.isfinite(V.values[start:])
    return bool(np.all(~a | b))


def sup_distance(a, b):
    """Largest ``|a - b|`` over nodes where both are finite (inf if domains differ)."""
    fa, fb = np.isfinite(a.values), np.isfinite(b.values)
    if np.any(fa != fb):
        return float("inf")
    return float(np.max(np.abs(a.values[fa] - b.values[fa]), initial=0.0))


# --------------------------------------------------------------------------
# the equivalence experiment


PERTURBATIONS = {
    "cos(pi t)": lambda t, X: np.cos(np.pi * t) * np.ones(len(X)),
    "cos(pi x / 2) cos(pi t / 2)": lambda t, X: np.cos(np.pi * X[:, 0] / 2) * np.cos(np.pi * t / 2),
    "sin(pi t) (1 + |x|) / 2": lambda t, X: np.sin(np.pi * t) * (1 + np.linalg.norm(X, axis=1)) / 2,
}


def check_assumptions(problem, rep=None, n_times=5):
    """Run the convexity, envelope and outward-pointing checks; list failures."""
    times = np.linspace(problem.tgrid.t0, problem.tgrid.T, n_times)
    failed, reports = [], {}
    r11 = check_H11(problem.hamiltonian, times[:3])
    reports["H11"] = r11.to_dict()
    if not r11.passed:
        failed.append("H11")
    try:
        r25, r26 = check_H25_H26(problem.hamiltonian, problem.omega, problem.envelope_fns(),
                                 times, problem.qaxes)
        reports["H25"], reports["H26"] = r25.to_dict(), r26.to_dict()
        failed += [r.name for r in (r25, r26) if not r.passed]
    except ConfigError as exc:
        reports["H25_H26"] = str(exc)
        failed.append("H25/H26 (envelopes missing)")
    if problem.opc is None:
        failed.append("OPC (parameters missing)")
    else:
        ok, rep_opc = check_opc(problem)
        reports["OPC"] = rep_opc
        if not ok:
            failed.append("OPC")
    return failed, reports


def _verdict(V, v, problem, tol_eq, tol_scale):
    ws = check_weak_solution(V, problem, tol_scale=tol_scale)
    van, van_ok = check_vanishing(V, problem.vanishing_threshold * tol_scale)
    dist = sup_distance(V, v)
    equal = dist <= tol_eq
    admissible = ws.passed and van_ok
    return {
        "weak_solution": ws.passed,
        "interior_pass_fraction": ws.interior_pass_fraction,
        "interior_fail_fraction": ws.interior_fail_fraction,
        "vanishing": van,
        "vanishing_ok": van_ok,
        "distance_to_v": dist,
        "equal_to_v": equal,
        "consistent": admissible == equal,
    }


def equivalence_experiment(problem, rep=None, delta=0.2, tol_scale=1.0, no_tail_bound=False,
                           skip_assumptions=False, v=None):
    """Check that weak solutions in the vanishing class coincide with the value function.

    Scenarios: the computed value function itself, three smooth
    perturbations ``v + delta g``, and the closed-form solution (when the
    problem declares one) together with its shift by ``delta``.  Each
    verdict is consistent when "weak solution and vanishing" agrees with
    "equal to v within tolerance".
    """
    report = {"problem": problem.name}
    if not skip_assumptions:
        failed, areps = check_assumptions(problem, rep)
        report["assumptions"] = areps
        if failed:
            report["refused"] = failed
            report["passed"] = False
            return report
    if v is None:
        v = solve_v(problem, rep, no_tail_bound=no_tail_bound)
    tail = 0.0 if not np.isfinite(v.tail_bound) else v.tail_bound
    tol_eq = tol_scale * EQ_FACTOR * (v.dt + v.dx) + tail
    scen = {}
    scen["value function"] = _verdict(v, v, problem, tol_eq, tol_scale)
    tv = problem.tgrid.nodes
    X = problem.xnodes()
    for name, g in PERTURBATIONS.items():
        pert = np.stack([g(t, X).reshape(v.values.shape[1:]) for t in tv])
        Vp = v.copy_with(v.values + delta * pert, f"v + {delta} {name}")
        scen[Vp.kind] = _verdict(Vp, v, problem, tol_eq, tol_scale)
    if problem.closed_form is not None:
        cf = from_function(problem, problem.closed_form, "closed form", v.tail_bound)
        scen["closed form"] = _verdict(cf, v, problem, tol_eq, tol_scale)
        shifted = cf.copy_with(cf.values + delta, f"closed form + {delta}")
        scen[shifted.kind] = _verdict(shifted, v, problem, tol_eq, tol_scale)
    report["tail_bound"] = v.tail_bound
    report["equality_tolerance"] = tol_eq
    report["scenarios"] = scen
    report["lac_surrogate"] = lac_surrogate(v)
    report["passed"] = all(s["consistent"] for s in scen.values())
    return report
