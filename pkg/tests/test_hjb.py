import json

import numpy as np
import pytest

from hjbrep import hjb
from hjbrep.errors import ConfigError
from hjbrep.fenchel import Axis
from hjbrep.geometry import Polytope
from hjbrep.hamiltonians import load_problem, parse_problem, shipped_config


def _small(name, T=2.0, nt=51, nx=41, **over):
    """A shipped problem on a coarser, shorter grid."""
    d = json.loads(shipped_config(name).read_text())
    d["grids"]["t"] = {"t0": 0.0, "T": T, "nt": nt}
    d["grids"]["x"] = [{"lo": -2.0, "hi": 2.0, "count": nx}]
    d.update(over)
    return parse_problem(json.dumps(d), name)


@pytest.fixture(scope="module")
def const_small():
    # dt = 0.02, dx = 0.04; the horizon is short, so the vanishing threshold is raised
    return _small("eikonal-constant-cost", T=4.0, nt=201, nx=101, vanishing_threshold=0.1)


@pytest.fixture(scope="module")
def const_v(const_small):
    return hjb.solve_v(const_small)


class TestTailBound:
    def test_formula(self):
        prob = load_problem(shipped_config("eikonal-constant-cost"))
        # int_8^inf max(e^-s, 3 e^-s) ds with R = 2
        assert hjb.tail_bound(prob) == pytest.approx(3 * np.exp(-8), rel=1e-6)

    def test_missing_envelopes(self):
        prob = _small("eikonal-constant-cost", envelopes={})
        with pytest.raises(ConfigError):
            hjb.tail_bound(prob)
        assert np.isnan(hjb.tail_bound(prob, no_tail_bound=True))


class TestDynamicProgramming:
    def test_step_forbids_leaving_omega(self):
        omega = Polytope([[0.0], [1.0]])
        xaxes = (Axis(0.0, 1.0, 3),)
        X = xaxes[0].nodes[:, None]
        F = np.array([[[1.0], [-1.0]]] * 3)      # two controls: right / left at unit speed
        L = np.array([[0.0, 5.0]] * 3)
        vals, best = hjb._step(np.zeros(3), xaxes, X, F, L, omega, 0.5)
        # at x = 1 moving right leaves omega, so the costly left move is taken
        np.testing.assert_allclose(vals, [0.0, 0.0, 2.5])
        assert best.tolist() == [0, 0, 1]

    def test_constant_cost_oracle(self, const_small, const_v):
        t = const_v.tnodes[:, None]
        want = np.exp(-t) - np.exp(-const_small.tgrid.T)
        err = np.max(np.abs(const_v.values - want))
        assert err <= 2 * const_v.dt

    def test_v_matches_W(self, const_small, const_v):
        W = hjb.solve_W(const_small)
        assert hjb.sup_distance(const_v, W) <= 2 * (const_v.dt + const_v.dx)

    def test_dpp_residual_zero(self, const_small, const_v):
        assert hjb.dpp_residual(const_v, const_small) <= 1e-12

    def test_csv_dump(self, const_v):
        lines = const_v.to_csv().splitlines()
        assert lines[0] == "t,x1,value"
        assert len(lines) == 1 + const_v.values.size


class TestWeakSolution:
    def test_subdifferential_of_smooth_function(self, const_small):
        V = hjb.from_function(const_small, lambda t, X: t + X[:, 0] ** 2)
        ti, xi = 10, 30
        x = V.xaxes[0].nodes[xi]
        c = hjb.numeric_subdifferential(V, ti, xi)
        assert len(c) > 0
        # the gradient (1, 2x) lies inside the accepted candidate box
        lo, hi = c.min(axis=0), c.max(axis=0)
        assert lo[0] <= 1.0 <= hi[0] and lo[1] <= 2 * x <= hi[1]

    def test_closed_form_passes_and_perturbation_fails(self, const_small):
        cf = hjb.from_function(const_small, const_small.closed_form)
        assert hjb.check_weak_solution(cf, const_small).passed
        pert = hjb.from_function(const_small, lambda t, X: np.exp(-t) + 0.2 * np.cos(np.pi * t))
        rep = hjb.check_weak_solution(pert, const_small)
        assert not rep.passed
        assert rep.interior_fail_fraction >= 0.5
        d = rep.to_dict()
        assert d["violations"] and not d["passed"]

    def test_vanishing(self, const_small):
        cf = hjb.from_function(const_small, lambda t, X: np.exp(-3 * t), tail=1e-4)
        total, ok = hjb.check_vanishing(cf, 0.01)
        assert cf.values.shape == (201, 101)
        assert ok and total == pytest.approx(np.exp(-3 * cf.tnodes[-2]) + 1e-4)
        shifted = cf.copy_with(cf.values + 0.2, "shifted")
        assert not hjb.check_vanishing(shifted, 0.01)[1]

    def test_distances_and_domains(self, const_small, const_v):
        other = const_v.copy_with(const_v.values + 0.1, "shifted")
        assert hjb.sup_distance(const_v, other) == pytest.approx(0.1)
        assert hjb.dom_inclusion(const_v, other)
        holes = const_v.values.copy()
        holes[-1, 0] = np.inf
        assert not hjb.dom_inclusion(const_v, const_v.copy_with(holes, "holes"))
        assert hjb.sup_distance(const_v, const_v.copy_with(holes, "holes")) == np.inf
        assert hjb.lac_surrogate(const_v) >= 0.0

    def test_epi_hypo_derivatives_on_v(self, const_small, const_v):
        rep = hjb.check_epi_hypo_derivatives(const_v, const_small)
        assert rep.passed, rep


class TestOutwardPointing:
    def test_positive_fixture(self):
        ok, rep = hjb.check_opc(load_problem(shipped_config("eikonal-constant-cost")))
        assert ok and rep["triggered"] > 0

    def test_negative_fixture_has_witness(self):
        ok, rep = hjb.check_opc(load_problem(shipped_config("opc-failure")))
        assert not ok
        assert {"t", "y", "q"} <= set(rep)

    def test_missing_parameters(self):
        with pytest.raises(ConfigError):
            hjb.check_opc(_small("eikonal-constant-cost", opc=None))


class TestEquivalence:
    def test_small_problem_consistent(self, const_small, const_v):
        rep = hjb.equivalence_experiment(const_small, skip_assumptions=True, v=const_v)
        assert rep["passed"], rep["scenarios"]
        s = rep["scenarios"]
        assert s["value function"]["weak_solution"] and s["value function"]["equal_to_v"]
        assert not s["closed form + 0.2"]["equal_to_v"]

    def test_refuses_when_assumptions_fail(self):
        rep = hjb.equivalence_experiment(load_problem(shipped_config("opc-failure")))
        assert "OPC" in rep["refused"] and not rep["passed"]
