import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hjbrep.errors import ConfigError
from hjbrep.hamiltonians import (HamiltonianSpec, compile_expr, load_problem, parse_problem,
                                 shipped_config)

SHIPPED = ["eikonal", "sup-affine", "quadratic", "eikonal-constant-cost", "distance-cost",
           "opc-failure"]


def _base_config(**over):
    d = {
        "name": "tiny",
        "hamiltonian": {"family": "scaled-eikonal", "coeffs": {"a": "1", "b": "0", "c": "0"}},
        "omega": {"vertices": [[-1.0], [1.0]]},
        "grids": {"t": {"T": 1.0, "nt": 11}, "x": [{"lo": -1, "hi": 1, "count": 11}]},
    }
    d.update(over)
    return d


class TestExpr:
    def test_evaluates_with_state_and_time(self):
        e = compile_expr("exp(-t) * (1 + abs(x))")
        np.testing.assert_allclose(e(1.0, [[-2.0], [0.0]]), np.exp(-1) * np.array([3.0, 1.0]))

    def test_two_dimensional_names(self):
        e = compile_expr("x1 - 2 * x2 + r", n=2)
        np.testing.assert_allclose(e(0.0, [[3.0, 4.0]]), [3 - 8 + 5])

    @pytest.mark.parametrize("src", ["__import__('os')", "x.real", "[1, 2]", "y + 1",
                                     "exp(t, base=2)", "'a'", "x if t else 1", "x2"])
    def test_rejects_unsafe_or_unknown(self, src):
        with pytest.raises(ConfigError):
            compile_expr(src)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3, 3), st.floats(0, 5))
    def test_matches_python_arithmetic(self, x, t):
        e = compile_expr("sin(pi * t) + x ** 2 / (1 + t) - max(x, 0)")
        want = np.sin(np.pi * t) + x ** 2 / (1 + t) - max(x, 0.0)
        assert e(t, [[x]])[0] == pytest.approx(want, abs=1e-12)


class TestHamiltonianSpec:
    def test_eikonal_values(self):
        H = HamiltonianSpec.eikonal(a=2.0, b=0.5, c=1.0)
        np.testing.assert_allclose(H.eval(0.0, [0.0], np.array([[-1.0], [2.0]])), [0.5, 4.0])

    def test_sup_affine_values(self):
        H = HamiltonianSpec.from_dict({"family": "sup-affine", "coeffs": {"pieces": [
            {"f": -1, "l": 0}, {"f": 1, "l": 0}, {"f": 0.5, "l": -0.25}]}})
        p = np.array([[-2.0], [0.0], [0.4], [2.0]])
        want = np.max([-p[:, 0], p[:, 0], 0.5 * p[:, 0] + 0.25], axis=0)
        np.testing.assert_allclose(H.eval(0.0, [0.0], p), want)

    def test_quadratic_closed_form_conjugate(self):
        H = HamiltonianSpec.from_dict({"family": "quadratic", "coeffs": {"a": 2, "c": 1}})
        q = np.array([[-1.0], [0.5]])
        np.testing.assert_allclose(H.conjugate_closed_form(0.0, [0.0], q), q[:, 0] ** 2 / 4 + 1)

    def test_eikonal_2d_conjugate_domain(self):
        H = HamiltonianSpec.eikonal(a=1.0, b=0.5, n=2)
        out = H.conjugate_closed_form(0.0, [0.0, 0.0], np.array([[0.5, 0.5], [1.6, 0.5]]))
        assert out[0] == 0.0 and out[1] == np.inf

    def test_unknown_family(self):
        with pytest.raises(ConfigError):
            HamiltonianSpec.from_dict({"family": "cubic"})


class TestParseProblem:
    @pytest.mark.parametrize("name", SHIPPED)
    def test_shipped_configs_load(self, name):
        prob = load_problem(shipped_config(name))
        assert prob.n == 1
        assert prob.omega.full_dimensional

    def test_malformed_json_reports_line(self):
        with pytest.raises(ConfigError, match="line 3"):
            parse_problem('{\n "name": "x",\n "omega": ]\n}')

    def test_negative_curvature_rejected_with_line(self):
        text = json.dumps(_base_config(hamiltonian={
            "family": "quadratic", "coeffs": {"a": "x"}}), indent=1)
        with pytest.raises(ConfigError, match=r"line \d+: coefficient a"):
            parse_problem(text)

    def test_empty_interior_rejected(self):
        d = _base_config(omega={"vertices": [[0.0, 0.0], [1.0, 1.0]]}, state_dim=2,
                         hamiltonian={"family": "scaled-eikonal", "coeffs": {"b": [0, 0]}})
        d["grids"]["x"] = [{"lo": -1, "hi": 1, "count": 5}] * 2
        with pytest.raises(ConfigError, match="interior"):
            parse_problem(json.dumps(d))

    def test_empty_time_interval_rejected(self):
        d = _base_config()
        d["grids"]["t"] = {"t0": 1.0, "T": 1.0, "nt": 11}
        with pytest.raises(ConfigError, match="T > t0"):
            parse_problem(json.dumps(d))

    def test_state_grid_must_cover_omega(self):
        d = _base_config()
        d["grids"]["x"] = [{"lo": -0.5, "hi": 1, "count": 11}]
        with pytest.raises(ConfigError, match="cover"):
            parse_problem(json.dumps(d))

    def test_opc_parameters_positive(self):
        with pytest.raises(ConfigError, match="positive"):
            parse_problem(json.dumps(_base_config(opc={"eta": 0.5, "r": 0, "M": 1})))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_problem(tmp_path / "absent.json")
        with pytest.raises(ConfigError):
            shipped_config("absent")

    def test_defaults_and_envelopes(self):
        d = _base_config(envelopes={"phi": "exp(-t)"})
        prob = parse_problem(json.dumps(d))
        assert prob.qaxes[0].count == 81
        assert prob.envelope("phi")(1.0) == pytest.approx(np.exp(-1))
        assert prob.envelope("psi") is None
        assert prob.tgrid.step == pytest.approx(0.1)
