"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The lines are printed in the "acceptance criteria" section of the pytest
terminal summary.
"""

import time

import numpy as np
import pytest

from hjbrep import hjb
from hjbrep.fenchel import Axis, GridFunction, biconjugate_residual, llt
from hjbrep.geometry import Polytope, hausdorff, proj_map, steiner
from hjbrep.hamiltonians import load_problem, shipped_config
from hjbrep.representation import Representation, Tolerances

REP_FIXTURES = ("eikonal", "sup-affine", "quadratic")
SOLVE_PROBLEMS = ("eikonal-constant-cost", "distance-cost")


def _random_polytope(rng, dim):
    if dim == 1:
        return Polytope(rng.uniform(-2, 2, size=(2, 1)))
    return Polytope(rng.uniform(-2, 2, size=(rng.integers(3, 8), 2)))


def _jitter(rng, J, scale):
    return Polytope(J.vertices + scale * rng.normal(size=J.vertices.shape))


def _ball_point(rng, dim, radius):
    v = rng.normal(size=dim)
    return radius * rng.uniform() ** (1 / dim) * v / np.linalg.norm(v)


@pytest.fixture(scope="module")
def reps():
    out = {}
    for name in REP_FIXTURES:
        prob = load_problem(shipped_config(name))
        rep = Representation(prob.hamiltonian, prob.qaxes, envelopes=prob.envelope_fns(),
                             tolerances=Tolerances(), conj_radius=max(prob.omega_radius, 1.0))
        out[name] = (prob, rep)
    return out


@pytest.fixture(scope="module")
def solved():
    out = {}
    for name in SOLVE_PROBLEMS:
        prob = load_problem(shipped_config(name))
        t0 = time.perf_counter()
        v = hjb.solve_v(prob)
        tv = time.perf_counter() - t0
        t0 = time.perf_counter()
        W = hjb.solve_W(prob)
        tw = time.perf_counter() - t0
        out[name] = (prob, v, W, tv, tw)
    return out


def test_c01_projection_map_lipschitz(criterion):
    rng = np.random.default_rng(20240601)
    start = time.perf_counter()
    worst_gap, worst_ratio = -np.inf, 0.0
    for k in range(200):
        dim = 1 + k % 2
        J = _random_polytope(rng, dim)
        K = _jitter(rng, J, 0.3) if k % 4 else _random_polytope(rng, dim)
        u = _ball_point(rng, dim, 3.0)
        v = u + 0.3 * rng.normal(size=dim) if k % 3 else _ball_point(rng, dim, 3.0)
        lhs = hausdorff(proj_map(u, J), proj_map(v, K), n_dirs=512)
        rhs = 5 * (hausdorff(J, K) + np.linalg.norm(u - v))
        worst_gap = max(worst_gap, lhs - rhs)
        if rhs > 0:
            worst_ratio = max(worst_ratio, lhs / rhs * 5)
    elapsed = time.perf_counter() - start
    ok = worst_gap <= 1e-6 and elapsed < 30
    criterion(1, "projection map 5-Lipschitz", ok,
              f"max ratio {worst_ratio:.3f} (bound 5), max gap {worst_gap:.3g}, {elapsed:.1f}s")


def test_c02_steiner_properties(criterion):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    member_ok, worst = True, -np.inf
    for k in range(100):
        dim = 1 + k % 2
        J = _random_polytope(rng, dim)
        K = _jitter(rng, J, 0.2) if k % 3 else _random_polytope(rng, dim)
        sj, sk = steiner(J, full=True), steiner(K, full=True)
        member_ok &= bool(J.contains(sj.point, 1e-12))
        member_ok &= bool(K.contains(sk.point, 1e-12))
        gap = (np.linalg.norm(sj.point - sk.point)
               - dim * hausdorff(J, K) - 3 * (sj.error + sk.error))
        worst = max(worst, gap)
    mid = steiner(Polytope([[-1.3], [2.1]]))[0]
    sq = steiner(Polytope([[0, 0], [2, 0], [2, 2], [0, 2]]))
    elapsed = time.perf_counter() - start
    err_mid = abs(mid - 0.4)
    err_sq = float(np.linalg.norm(sq - [1.0, 1.0]))
    ok = member_ok and worst <= 0 and err_mid <= 1e-3 and err_sq <= 1e-3 and elapsed < 60
    criterion(2, "Steiner point properties", ok,
              f"membership {member_ok}, max Lipschitz gap {worst:.3g}, midpoint err {err_mid:.1e}, "
              f"square err {err_sq:.1e}, {elapsed:.1f}s")


def test_c03_conjugation_laws(criterion):
    P = (Axis.symmetric(3.0, 601),)
    h = P[0].step
    r_abs = biconjugate_residual(GridFunction.sample(lambda p: np.abs(p[:, 0]), P))
    r_sq = biconjugate_residual(GridFunction.sample(lambda p: 0.5 * p[:, 0] ** 2, P))
    Q = (Axis.symmetric(2.0, 81),)
    rng = np.random.default_rng(11)
    shift_err = mono_err = 0.0
    for _ in range(50):
        a, b, s, w = rng.uniform(-1, 1), rng.uniform(0, 2), rng.uniform(-1, 1), rng.uniform(0, 1)
        f = GridFunction.sample(lambda p: a * p[:, 0] + b * p[:, 0] ** 2 + w * np.abs(p[:, 0] - s), P)
        c = rng.uniform(-5, 5)
        hs = llt(f, Q).values
        hc = llt(GridFunction(P, f.values + c), Q).values
        fin = np.isfinite(hs)
        if np.any(fin != np.isfinite(hc)):
            shift_err = np.inf
        else:
            shift_err = max(shift_err, float(np.max(np.abs(hc[fin] - (hs[fin] - c)), initial=0)))
        g = GridFunction(P, f.values + rng.uniform(0, 1) * P[0].nodes ** 2)
        diff = llt(g, Q, extend=False).values - llt(f, Q, extend=False).values
        mono_err = max(mono_err, float(np.max(diff)))
    ok = r_abs <= h and r_sq <= 2 * h ** 2 and shift_err <= 1e-12 and mono_err <= 0
    criterion(3, "conjugation laws", ok,
              f"|p| residual {r_abs:.2e} (<= {h:.2e}), p^2/2 residual {r_sq:.2e} "
              f"(<= {2 * h ** 2:.2e}), shift err {shift_err:.1e}, order violation {max(mono_err, 0):.1e}")


def _sample_nodes(prob):
    times = np.linspace(prob.tgrid.t0, prob.tgrid.T, 3)
    xs = [np.array([-1.5]), np.array([0.0]), np.array([1.0])]
    return [(t, x) for t in times for x in xs]


def test_c04_representation_identity(criterion, reps):
    worst_res, worst_over, worst_tol, ok = 0.0, -np.inf, 0.0, True
    for name in ("eikonal", "sup-affine"):
        prob, rep = reps[name]
        rng = np.random.default_rng(4)
        for t, x in _sample_nodes(prob):
            p = rng.uniform(-3, 3, size=(64, 1))
            U = rep.u_samples(t, x, n=512, seed=0)
            chk = rep.verify_identity(t, x, p, U)
            over = chk.details["max_overshoot"]
            ok &= chk.value <= chk.tolerance and over <= rep.tol.ep * 10
            worst_res = max(worst_res, chk.value)
            worst_over = max(worst_over, over)
            worst_tol = max(worst_tol, chk.tolerance)
    criterion(4, "representation identity", ok,
              f"max |H - sup| {worst_res:.2e} (tol_id {worst_tol:.2e}), max overshoot {worst_over:.1e}")


def test_c05_domain_and_graph_coverage(criterion, reps):
    worst_cover, worst_graph, ok = 0.0, 0.0, True
    for name in REP_FIXTURES:
        prob, rep = reps[name]
        for t, x in _sample_nodes(prob):
            U = rep.u_samples(t, x, n=512, seed=0)
            dc = rep.verify_domain_cover(t, x, U)
            gc = rep.verify_graph_cover(t, x)
            ok &= dc.value <= 0.05 and gc.passed
            worst_cover = max(worst_cover, dc.value)
            worst_graph = max(worst_graph, gc.value)
    criterion(5, "domain and graph coverage", ok,
              f"max Hausdorff(D, f(B)) {worst_cover:.2e} (<= 0.05), "
              f"max graph error {worst_graph:.2e}")


def test_c06_lipschitz_constant(criterion, reps):
    parts, ok = [], True
    for name in REP_FIXTURES:
        prob, rep = reps[name]
        chk = rep.verify_lipschitz(prob.tgrid.t0, max(prob.omega_radius, 1.0), n_pairs=500, seed=0)
        ok &= chk.value <= 5 * (prob.n + 1) + 0.1
        parts.append(f"{name} {chk.value:.3f}")
    criterion(6, "Lipschitz constant", ok, ", ".join(parts) + f" (bound {5 * 2 + 0.1})")


def test_c07_value_function_oracles(criterion, solved):
    prob, v, _, tv1, _ = solved["eikonal-constant-cost"]
    e1 = float(np.max(np.abs(v.values - np.exp(-v.tnodes)[:, None])))
    tol1 = np.exp(-8) + 2 * v.dt
    prob2, v2, _, tv2, _ = solved["distance-cost"]
    X = v2.xnodes()[:, 0]
    t = v2.tnodes[:, None]
    want = np.exp(-t) * (np.abs(X) - 1 + np.exp(-np.abs(X)))[None]
    e2 = float(np.max(np.abs(v2.values - want)))
    tol2 = 5 * (v2.dt + v2.dx)
    ok = e1 <= tol1 and e2 <= tol2 and tv1 < 120 and tv2 < 120
    criterion(7, "value-function oracles", ok,
              f"constant cost err {e1:.2e} (<= {tol1:.2e}, computed tail {v.tail_bound:.2e}), "
              f"distance cost err {e2:.2e} (<= {tol2:.2e}), solves {tv1:.1f}s / {tv2:.1f}s")


def test_c08_cv_equivalence(criterion, solved):
    parts, ok = [], True
    for name in SOLVE_PROBLEMS:
        _, v, W, _, _ = solved[name]
        d = hjb.sup_distance(v, W)
        tol = 2 * (v.dt + v.dx + v.tail_bound)
        ok &= d <= tol
        parts.append(f"{name} {d:.1e} (<= {tol:.2e})")
    criterion(8, "||v - W|| bound", ok, ", ".join(parts))


def test_c09_weak_solution_residuals(criterion, solved):
    passes, fails, smooth_fails, ok = [], [], [], True
    for name in SOLVE_PROBLEMS:
        prob, v, _, _, _ = solved[name]
        cf = hjb.from_function(prob, prob.closed_form, tail=v.tail_bound)
        rc = hjb.check_weak_solution(cf, prob)
        shifted = cf.copy_with(cf.values + 0.2, "closed form + 0.2")
        rs = hjb.check_weak_solution(shifted, prob)
        wavy = cf.copy_with(cf.values + 0.2 * np.cos(np.pi * cf.tnodes)[:, None], "wavy")
        rw = hjb.check_weak_solution(wavy, prob)
        ok &= rc.interior_pass_fraction >= 0.98 and rs.interior_fail_fraction >= 0.5
        passes.append(f"{rc.interior_pass_fraction:.2f}")
        fails.append(f"{rs.interior_fail_fraction:.2f}")
        smooth_fails.append(f"{rw.interior_fail_fraction:.2f}")
    criterion(9, "weak-solution residuals", ok,
              f"closed forms pass at {'/'.join(passes)} (>= 0.98); closed form + 0.2 fails at "
              f"{'/'.join(fails)} of interior nodes (>= 0.50 required; a constant shift leaves "
              f"every derivative unchanged); 0.2 cos(pi t) perturbation fails at "
              f"{'/'.join(smooth_fails)}")


def test_c10_outward_pointing_condition(criterion):
    start = time.perf_counter()
    ok_pos, _ = hjb.check_opc(load_problem(shipped_config("eikonal-constant-cost")))
    ok_neg, rep = hjb.check_opc(load_problem(shipped_config("opc-failure")))
    elapsed = time.perf_counter() - start
    witness = all(k in rep for k in ("t", "y", "q"))
    ok = ok_pos and not ok_neg and witness and elapsed < 10
    criterion(10, "outward pointing condition", ok,
              f"positive {ok_pos}, negative {ok_neg} with witness y={rep.get('y')} "
              f"q={rep.get('q')}, {elapsed:.2f}s")


def test_c11_equivalence_experiment(criterion, solved):
    parts, ok = [], True
    for name in SOLVE_PROBLEMS:
        prob, v, _, _, _ = solved[name]
        rep = hjb.equivalence_experiment(prob, v=v)
        sc = rep.get("scenarios", {})
        n_ok = sum(s["consistent"] for s in sc.values())
        ok &= rep["passed"] and len(sc) >= 3
        parts.append(f"{name} {n_ok}/{len(sc)} consistent")
    criterion(11, "equivalence experiment", ok, ", ".join(parts))
