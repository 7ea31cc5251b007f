"""Declarative Hamiltonians, constraint sets and problem configs.

Three families are supported::

    scaled-eikonal   a(t,x)|p| + <b(t,x), p> - c(t,x)
    sup-affine       max_i <p, f_i(t,x)> - l_i(t,x)
    quadratic        a(t,x)|p|^2 / 2 - c(t,x)

Coefficients are closed-form expressions in ``t`` and the state, written in a
small whitelisted grammar (see :func:`compile_expr`).
"""

from __future__ import annotations

import ast
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .fenchel import Axis
from .geometry import Polytope

FAMILIES = ("scaled-eikonal", "sup-affine", "quadratic")

_FUNCS = {
    "exp": np.exp,
    "abs": np.abs,
    "sqrt": np.sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "log": np.log,
    "norm": np.abs,
    "min": np.minimum,
    "max": np.maximum,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
           ast.Div: np.divide, ast.Pow: np.power}
_UNOPS = {ast.USub: np.negative, ast.UAdd: np.positive}


class Expr:
    """A compiled closed-form expression of ``(t, x)``.

    Variables: ``t``; ``x`` (the scalar state when n = 1); ``x1``, ``x2``
    (state components); ``r`` (Euclidean norm of the state).  Functions:
    exp, abs, sqrt, sin, cos, log, norm, min, max; constants pi and e.
    """

    def __init__(self, source, n):
        self.source = str(source)
        self.n = n
        try:
            tree = ast.parse(self.source, mode="eval")
        except SyntaxError as exc:
            raise ConfigError(f"cannot parse expression {self.source!r}: {exc.msg}") from None
        self._check(tree.body)
        self._tree = tree.body

    def _check(self, node):
        allowed_names = {"t", "r", *(f"x{i + 1}" for i in range(self.n)), *_CONSTS}
        if self.n == 1:
            allowed_names.add("x")
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ConfigError(f"only numeric constants are allowed in {self.source!r}")
        elif isinstance(node, ast.Name):
            if node.id not in allowed_names:
                raise ConfigError(f"unknown name {node.id!r} in {self.source!r}")
        elif isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ConfigError(f"operator not allowed in {self.source!r}")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if type(node.op) not in _UNOPS:
                raise ConfigError(f"operator not allowed in {self.source!r}")
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS or node.keywords:
                raise ConfigError(f"function call not allowed in {self.source!r}")
            for a in node.args:
                self._check(a)
        else:
            raise ConfigError(f"syntax not allowed in {self.source!r}: {type(node).__name__}")

    def _eval(self, node, env):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id] if node.id in env else _CONSTS[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNOPS[type(node.op)](self._eval(node.operand, env))
        return _FUNCS[node.func.id](*[self._eval(a, env) for a in node.args])

    def __call__(self, t, X):
        """Evaluate for states ``X`` of shape (N, n) (or a single state)."""
        X = np.asarray(X, dtype=float).reshape(-1, self.n)
        env = {"t": np.asarray(t, dtype=float), "r": np.linalg.norm(X, axis=1)}
        for i in range(self.n):
            env[f"x{i + 1}"] = X[:, i]
        if self.n == 1:
            env["x"] = X[:, 0]
        with np.errstate(all="ignore"):
            out = self._eval(self._tree, env)
        return np.broadcast_to(np.asarray(out, dtype=float), (len(X),)).copy()

    def of_t(self, t):
        """Evaluate an expression that depends on t only."""
        return float(self(t, np.zeros(self.n))[0])

    def __repr__(self):
        return f"Expr({self.source!r})"


def compile_expr(source, n=1):
    return Expr(source, n)


def _expr_list(src, n, what):
    if isinstance(src, (int, float, str)):
        src = [src] if n == 1 else None
    if src is None or len(src) != n:
        raise ConfigError(f"{what} must have {n} components")
    return [Expr(s, n) for s in src]


@dataclass
class HamiltonianSpec:
    """A Hamiltonian ``H(t, x, p)`` from one of the supported families."""

    family: str
    n: int
    coeffs: dict
    raw: dict = field(default_factory=dict)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, d, n=1):
        fam = d.get("family")
        if fam not in FAMILIES:
            raise ConfigError(f"unknown Hamiltonian family {fam!r}; expected one of {FAMILIES}")
        co = d.get("coeffs", {})
        if fam == "scaled-eikonal":
            coeffs = {"a": Expr(co.get("a", 1), n),
                      "b": _expr_list(co.get("b", [0] * n if n > 1 else 0), n, "b"),
                      "c": Expr(co.get("c", 0), n)}
        elif fam == "quadratic":
            coeffs = {"a": Expr(co.get("a", 1), n), "c": Expr(co.get("c", 0), n)}
        else:
            pieces = co.get("pieces")
            if not pieces:
                raise ConfigError("sup-affine needs a nonempty list of pieces")
            coeffs = {"pieces": [(_expr_list(pc["f"], n, "f"), Expr(pc.get("l", 0), n))
                                 for pc in pieces]}
        return cls(fam, n, coeffs, dict(d))

    @classmethod
    def eikonal(cls, a=1, b=0, c=0, n=1):
        return cls.from_dict({"family": "scaled-eikonal",
                              "coeffs": {"a": a, "b": b if n == 1 else [b] * n, "c": c}}, n)

    # -- evaluation ---------------------------------------------------------

    def eval_pairs(self, t, X, P):
        """``H(t, X_i, P_i)`` for matching rows of X and P (shape (N, n))."""
        X = np.asarray(X, dtype=float).reshape(-1, self.n)
        P = np.asarray(P, dtype=float).reshape(-1, self.n)
        if len(X) == 1 and len(P) > 1:
            X = np.broadcast_to(X, P.shape)
        c = self.coeffs
        if self.family == "scaled-eikonal":
            b = np.stack([e(t, X) for e in c["b"]], axis=1)
            return c["a"](t, X) * np.linalg.norm(P, axis=1) + np.sum(b * P, axis=1) - c["c"](t, X)
        if self.family == "quadratic":
            return 0.5 * c["a"](t, X) * np.sum(P * P, axis=1) - c["c"](t, X)
        vals = []
        for f, l in c["pieces"]:
            fv = np.stack([e(t, X) for e in f], axis=1)
            vals.append(np.sum(fv * P, axis=1) - l(t, X))
        return np.max(vals, axis=0)

    def eval(self, t, x, p):
        """``H(t, x, p)`` for one state and momenta of shape (N, n) or (n,)."""
        p = np.asarray(p, dtype=float)
        single = p.ndim == 0 or (p.ndim == 1 and self.n > 1)
        out = self.eval_pairs(t, np.asarray(x, dtype=float).reshape(1, self.n), p.reshape(-1, self.n))
        return float(out[0]) if single else out

    def slope_bound(self, t, x, qradius=1.0):
        """Bound on ``|q|`` over the conjugate's domain (coercive: a momentum scale).

        For the quadratic family the domain is all of R^n; the value returned
        is the momentum radius whose slopes exceed ``qradius`` twice over.
        """
        X = np.asarray(x, dtype=float).reshape(1, self.n)
        c = self.coeffs
        if self.family == "scaled-eikonal":
            b = np.array([e(t, X)[0] for e in c["b"]])
            return float(c["a"](t, X)[0] + np.linalg.norm(b))
        if self.family == "quadratic":
            a = float(c["a"](t, X)[0])
            return 2.0 * qradius / a + 1.0 if a > 0 else 1.0
        return max(float(np.linalg.norm([e(t, X)[0] for e in f])) for f, _ in c["pieces"])

    def conjugate_closed_form(self, t, x, q):
        """Closed-form ``H*(t, x, q)`` for eikonal and quadratic families."""
        X = np.asarray(x, dtype=float).reshape(1, self.n)
        q = np.asarray(q, dtype=float).reshape(-1, self.n)
        c = self.coeffs
        if self.family == "scaled-eikonal":
            a = c["a"](t, X)[0]
            b = np.array([e(t, X)[0] for e in c["b"]])
            inside = np.linalg.norm(q - b, axis=1) <= a * (1 + 1e-12) + 1e-12
            return np.where(inside, c["c"](t, X)[0], np.inf)
        if self.family == "quadratic":
            a = c["a"](t, X)[0]
            return np.sum(q * q, axis=1) / (2 * a) + c["c"](t, X)[0]
        raise NotImplementedError("no closed form for the sup-affine family")

    def fiber_coefficient_samples(self, times, X):
        """Samples of the curvature coefficient ``a`` (empty for sup-affine)."""
        if self.family == "sup-affine":
            return np.zeros(0)
        return np.concatenate([self.coeffs["a"](t, X) for t in times])


# --------------------------------------------------------------------------
# problems


@dataclass
class TimeGrid:
    t0: float
    T: float
    nt: int

    @property
    def nodes(self):
        return np.linspace(self.t0, self.T, self.nt)

    @property
    def step(self):
        return (self.T - self.t0) / (self.nt - 1)


@dataclass
class ProblemSpec:
    """A validated state-constrained infinite-horizon problem."""

    name: str
    hamiltonian: HamiltonianSpec
    omega: Polytope
    tgrid: TimeGrid
    xaxes: tuple
    qaxes: tuple
    ugrid: dict = field(default_factory=lambda: {"graph": True, "generic": 0})
    envelopes: dict = field(default_factory=dict)
    opc: dict | None = None
    closed_form: Expr | None = None
    tolerances: dict = field(default_factory=dict)
    vanishing_threshold: float = 0.01
    source: str | None = None

    @property
    def n(self):
        return self.hamiltonian.n

    def envelope(self, name):
        e = self.envelopes.get(name)
        return None if e is None else (lambda t, e=e: e.of_t(t))

    def envelope_fns(self):
        return {k: self.envelope(k) for k in self.envelopes}

    def xnodes(self):
        mesh = np.meshgrid(*[a.nodes for a in self.xaxes], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def dx(self):
        return max(a.step for a in self.xaxes)

    @property
    def omega_radius(self):
        return float(np.linalg.norm(self.omega.vertices, axis=1).max())


def _line_of(text, key):
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _fail(msg, text, key):
    line = _line_of(text, key)
    raise ConfigError(f"line {line}: {msg}" if line else msg)


def _axis(d, text, key):
    try:
        return Axis(float(d["lo"]), float(d["hi"]), int(d["count"]))
    except (KeyError, TypeError, ValueError) as exc:
        _fail(f"bad axis in {key!r}: {exc}", text, key)


def parse_problem(text, source=None):
    """Parse and validate a JSON problem config.

    Raises ConfigError (with a line number when one can be located) for
    malformed JSON, unknown families, negative curvature coefficients, a
    constraint set with empty interior, or an empty time interval.
    """
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}: malformed JSON: {exc.msg}") from None
    if not isinstance(d, dict):
        raise ConfigError("line 1: top level must be an object")
    for key in ("hamiltonian", "omega", "grids"):
        if key not in d:
            raise ConfigError(f"missing required key {key!r}")

    n = int(d.get("state_dim", len(d["omega"].get("vertices", [[0]])[0])))
    if not 1 <= n <= 2:
        _fail("state dimension must be 1 or 2", text, "omega")
    try:
        H = HamiltonianSpec.from_dict(d["hamiltonian"], n)
    except ConfigError as exc:
        _fail(str(exc), text, "hamiltonian")
    except (KeyError, TypeError) as exc:
        _fail(f"bad Hamiltonian coefficients: {exc}", text, "coeffs")

    try:
        omega = Polytope(d["omega"]["vertices"])
    except (KeyError, ValueError) as exc:
        _fail(f"bad omega: {exc}", text, "omega")
    if omega.dim != n:
        _fail("omega dimension does not match the state dimension", text, "omega")
    if not omega.full_dimensional:
        _fail("omega must have nonempty interior", text, "omega")

    g = d["grids"]
    tg = g.get("t", {})
    try:
        tgrid = TimeGrid(float(tg.get("t0", 0.0)), float(tg["T"]), int(tg["nt"]))
    except (KeyError, TypeError, ValueError) as exc:
        _fail(f"bad time grid: {exc}", text, "t")
    if not tgrid.T > tgrid.t0 or tgrid.nt < 3:
        _fail("time grid needs T > t0 and at least 3 nodes", text, "t")
    xaxes = tuple(_axis(a, text, "x") for a in g.get("x", []))
    if len(xaxes) != n:
        _fail(f"grids.x needs {n} axes", text, "x")
    lo, hi = omega.vertices.min(axis=0), omega.vertices.max(axis=0)
    for k, a in enumerate(xaxes):
        if a.lo > lo[k] + 1e-12 or a.hi < hi[k] - 1e-12:
            _fail("state grid must cover omega", text, "x")
    qaxes = tuple(_axis(a, text, "q") for a in g.get("q", [{"lo": -2, "hi": 2, "count": 81}] * n))
    if len(qaxes) != n:
        _fail(f"grids.q needs {n} axes", text, "q")

    # fiber convexity: curvature coefficient must be nonnegative on samples
    times = np.linspace(tgrid.t0, tgrid.T, 17)
    mesh = np.meshgrid(*[np.linspace(l, h, 9) for l, h in zip(lo, hi)], indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=1)
    a = H.fiber_coefficient_samples(times, X)
    if a.size and (np.any(~np.isfinite(a)) or np.any(a < 0)):
        _fail("coefficient a must be finite and nonnegative (convexity in p)", text, "a")
    probe = H.eval_pairs(times[0], X, np.ones_like(X))
    if not np.all(np.isfinite(probe)):
        _fail("Hamiltonian coefficients are not finite on omega", text, "coeffs")

    env = {}
    for k, v in (d.get("envelopes") or {}).items():
        try:
            env[k] = Expr(v, 1 if k != "closed_form" else n)
        except ConfigError as exc:
            _fail(str(exc), text, k)
    closed = d.get("closed_form")
    opc = d.get("opc")
    if opc is not None:
        try:
            opc = {k: float(opc[k]) for k in ("eta", "r", "M")}
        except (KeyError, TypeError, ValueError) as exc:
            _fail(f"opc needs numeric eta, r, M: {exc}", text, "opc")
        if min(opc.values()) <= 0:
            _fail("opc parameters must be positive", text, "opc")
    return ProblemSpec(
        name=d.get("name", Path(source).stem if source else "problem"),
        hamiltonian=H,
        omega=omega,
        tgrid=tgrid,
        xaxes=xaxes,
        qaxes=qaxes,
        ugrid={"graph": True, "generic": 0, **g.get("u", {})},
        envelopes=env,
        opc=opc,
        closed_form=Expr(closed, n) if closed is not None else None,
        tolerances=dict(d.get("tolerances", {})),
        vanishing_threshold=float(d.get("vanishing_threshold", 0.01)),
        source=source,
    )


def load_problem(path):
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from None
    return parse_problem(text, str(p))


def shipped_config(name):
    """Path of a config shipped with the package (e.g. ``"distance-cost"``)."""
    p = Path(__file__).parent / "configs" / f"{name}.json"
    if not p.exists():
        raise ConfigError(f"no shipped config named {name!r}")
    return p
