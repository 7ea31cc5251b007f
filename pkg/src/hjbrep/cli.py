"""Command-line entry point.

Examples
--------
::

    hjbrep conjugate eikonal-constant-cost --out out/conj
    hjbrep verify eikonal --out out/verify
    hjbrep solve distance-cost --out out/solve
    hjbrep check-opc opc-failure
    hjbrep equivalence eikonal-constant-cost

A config argument is either a path to a JSON file or the name of a shipped
config.  Exit codes: 0 success, 1 config error, 2 assumption failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import hjb
from .errors import ConfigError, HJBRepError
from .fenchel import check_H13, conjugate_data_batch
from .hamiltonians import load_problem, shipped_config
from .representation import Representation, Tolerances


@dataclass
class RunManifest:
    command: str
    config: str
    seed: int
    tolerances: dict
    output_dir: str
    timing: dict = field(default_factory=dict)
    exit_code: int = 0


def _fmt(v):
    return f"{v:.12g}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(float(c)) for c in r])


def _write_json(path, obj):
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        return str(o)
    Path(path).write_text(json.dumps(obj, indent=2, default=default, sort_keys=True) + "\n")


def _load(arg):
    p = Path(arg)
    if not p.exists():
        try:
            p = shipped_config(p.stem)
        except ConfigError:
            raise ConfigError(f"config {arg} not found") from None
    return load_problem(p), str(p)


def _make_rep(problem, args):
    return Representation(problem.hamiltonian, problem.qaxes, envelopes=problem.envelope_fns(),
                          tolerances=Tolerances(scale=args.tol_scale),
                          conj_radius=max(problem.omega_radius, 1.0))


def _sample_times(problem, k=3):
    return np.linspace(problem.tgrid.t0, problem.tgrid.T, k)


def _sample_states(problem, k=3):
    """A few state nodes: the grid node nearest the center plus spread points."""
    X = problem.xnodes()
    X = X[problem.omega.contains(X)]
    center = problem.omega.vertices.mean(axis=0)
    order = np.argsort(np.linalg.norm(X - center, axis=1))
    pick = [order[0]] + list(np.linspace(0, len(X) - 1, k).round().astype(int)[1:-1])
    return X[np.unique(pick)]


# --------------------------------------------------------------------------
# subcommands


def cmd_conjugate(problem, args, out):
    """H* slices, velocity-set bounds and gamma on the (t, x) grid."""
    H = problem.hamiltonian
    X = problem.xnodes()
    n = problem.n
    dom_rows, slice_rows = [], []
    slice_times = set(np.round(_sample_times(problem), 12).tolist())
    center = np.argmin(np.linalg.norm(X - problem.omega.vertices.mean(axis=0), axis=1))
    for t in problem.tgrid.nodes:
        for i, cd in enumerate(conjugate_data_batch(H, t, X, problem.qaxes)):
            lo = cd.domain.vertices.min(axis=0)
            hi = cd.domain.vertices.max(axis=0)
            dom_rows.append([t, *cd.x, *lo, *hi, cd.gamma, cd.graph_norm])
            if i == center and round(float(t), 12) in slice_times:
                for q, h in zip(cd.hstar.points(), cd.hstar.values.ravel()):
                    slice_rows.append([t, *cd.x, *q, h])
    xs = [f"x{k + 1}" for k in range(n)]
    _write_csv(out / "domain.csv", ["t", *xs, *[f"dlo{k + 1}" for k in range(n)],
                                    *[f"dhi{k + 1}" for k in range(n)], "gamma", "graph_norm"],
               dom_rows)
    _write_csv(out / "hstar_slices.csv", ["t", *xs, *[f"q{k + 1}" for k in range(n)], "hstar"],
               slice_rows)
    return hjb.EXIT_OK, {"domain_rows": len(dom_rows), "slice_rows": len(slice_rows)}


def cmd_represent(problem, args, out):
    rep = _make_rep(problem, args)
    rows = []
    for t in _sample_times(problem):
        for x in _sample_states(problem):
            U = rep.u_samples(t, x, n=64, seed=args.seed)
            rows.extend(rep.dump_rows(t, x, U))
    n = problem.n
    _write_csv(out / "representation.csv",
               ["t", *[f"x{k + 1}" for k in range(n)], *[f"u{k + 1}" for k in range(n + 1)],
                *[f"f{k + 1}" for k in range(n)], "l"], rows)
    return hjb.EXIT_OK, {"rows": len(rows), "steiner_error": rep.steiner_error}


def cmd_verify(problem, args, out):
    """All representation checks at sampled (t, x) nodes."""
    rep = _make_rep(problem, args)
    t0 = problem.tgrid.t0
    slope_ok = check_H13(problem.hamiltonian, t0).passed
    radii = (1.0,) if slope_ok else (1.0, 2.0, 4.0, 8.0)
    qr = max(max(abs(a.lo), abs(a.hi)) for a in problem.qaxes)
    rng = np.random.default_rng(args.seed)
    results = []
    for t in _sample_times(problem, 2):
        for x in _sample_states(problem):
            p = rng.uniform(-qr, qr, size=(64, problem.n))
            U = rep.u_samples(t, x, n=512, seed=args.seed)
            checks = [rep.verify_identity(t, x, p, U, radii=radii),
                      rep.verify_domain_cover(t, x, U),
                      rep.verify_graph_cover(t, x),
                      rep.verify_membership(t, x, U)]
            if slope_ok:
                checks.append(rep.verify_excess_bound(t, x, U))
            for c in checks:
                results.append({"t": t, "x": x.tolist(), **c.to_dict()})
    lip = rep.verify_lipschitz(t0, max(problem.omega_radius, 1.0), n_pairs=500, seed=args.seed)
    results.append({"t": t0, **lip.to_dict()})
    ok = all(r["passed"] for r in results)
    _write_json(out / "verify.json", {"passed": ok, "slope_bound_holds": slope_ok,
                                      "checks": results})
    return (hjb.EXIT_OK if ok else hjb.EXIT_VERIFICATION), {"passed": ok}


def cmd_solve(problem, args, out):
    v = hjb.solve_v(problem, no_tail_bound=args.no_tail_bound)
    W = hjb.solve_W(problem, no_tail_bound=args.no_tail_bound)
    (out / "v.csv").write_text(v.to_csv())
    (out / "W.csv").write_text(W.to_csv())
    info = {"tail_bound": v.tail_bound, "v_minus_W": hjb.sup_distance(v, W),
            "dpp_residual": hjb.dpp_residual(v, problem), "solve_seconds": v.timing,
            "v_at_origin_t0": float(v.values[0].ravel()[
                np.argmin(np.linalg.norm(v.xnodes(), axis=1))])}
    _write_json(out / "solve.json", info)
    return hjb.EXIT_OK, info


def cmd_check_opc(problem, args, out):
    ok, report = hjb.check_opc(problem)
    _write_json(out / "opc.json", report)
    if not ok:
        print(f"outward pointing condition fails at t={report['t']:.4g}, "
              f"y={report['y']}, q={report['q']}", file=sys.stderr)
    return (hjb.EXIT_OK if ok else hjb.EXIT_VERIFICATION), {"ok": ok}


def cmd_equivalence(problem, args, out):
    report = hjb.equivalence_experiment(problem, tol_scale=args.tol_scale,
                                        no_tail_bound=args.no_tail_bound)
    _write_json(out / "equivalence.json", report)
    if "refused" in report:
        print("assumption checks failed: " + ", ".join(report["refused"]), file=sys.stderr)
        return hjb.EXIT_ASSUMPTION, {"refused": report["refused"]}
    for name, s in report["scenarios"].items():
        print(f"{name:40s} weak={s['weak_solution']!s:5s} vanishing={s['vanishing_ok']!s:5s} "
              f"equal={s['equal_to_v']!s:5s} consistent={s['consistent']}")
    return (hjb.EXIT_OK if report["passed"] else hjb.EXIT_VERIFICATION), {
        "passed": report["passed"]}


COMMANDS = {
    "conjugate": cmd_conjugate,
    "represent": cmd_represent,
    "verify": cmd_verify,
    "solve": cmd_solve,
    "check-opc": cmd_check_opc,
    "equivalence": cmd_equivalence,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hjbrep",
        description="Represent convex Hamiltonians and solve state-constrained HJB problems.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0])
        sp.add_argument("config", help="path to a JSON problem config or a shipped config name")
        sp.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        sp.add_argument("--out", default=None,
                        help="output directory (default: ./out/<command>-<config name>)")
        sp.add_argument("--tol-scale", type=float, default=1.0,
                        help="multiply every verification tolerance (default 1.0)")
        sp.add_argument("--no-tail-bound", action="store_true",
                        help="allow solving without cost envelopes (tail bound reported as NaN)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.perf_counter()
    try:
        problem, path = _load(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return hjb.EXIT_CONFIG
    out = Path(args.out or f"out/{args.command}-{problem.name}")
    out.mkdir(parents=True, exist_ok=True)
    try:
        code, summary = COMMANDS[args.command](problem, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code, summary = hjb.EXIT_CONFIG, {"error": str(exc)}
    except HJBRepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code, summary = hjb.EXIT_VERIFICATION, {"error": str(exc)}
    manifest = RunManifest(
        command=args.command, config=path, seed=args.seed,
        tolerances={"tol_scale": args.tol_scale, "kappa": hjb.KAPPA, "sigma": hjb.SIGMA,
                    "rho": hjb.RHO, "no_tail_bound": args.no_tail_bound},
        output_dir=str(out), timing={"seconds": round(time.perf_counter() - start, 3)},
        exit_code=code)
    _write_json(out / "manifest.json", {**asdict(manifest), "summary": summary})
    return code


if __name__ == "__main__":
    sys.exit(main())
