"""Command-line interface: ``cpromp {learn,adapt,sample,bench,check-grad,example}``.

Exit codes: 0 success (``adapt``: converged), 2 ``adapt`` finished without
converging (artifacts are still written), 1 input or I/O error (including
unknown flags).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from cpromp.errors import CProMPError

log = logging.getLogger("cpromp")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2


class InputError(Exception):
    """Bad command-line input; reported without a traceback."""


class _Parser(argparse.ArgumentParser):
    """Argument errors are input errors: exit 1 (2 is reserved for non-convergence)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _need_out(path: str) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise InputError(f"output directory does not exist: {parent}")
    return p


def _solver_cfg(args):
    from cpromp.optimizer import SolverConfig

    kw = {}
    if getattr(args, "eps_c", None) is not None:
        kw["constraint_tol"] = args.eps_c
    if getattr(args, "outer_max", None) is not None:
        kw["outer_max_iters"] = args.outer_max
    return SolverConfig(**kw)


def _constraint_defaults(args) -> dict:
    d = {}
    if args.eta_default is not None:
        d["eta"] = args.eta_default
    if args.alpha_default is not None:
        d["alpha"] = args.alpha_default
    return d


# -- learn ---------------------------------------------------------------------------------------


def cmd_learn(args) -> int:
    from cpromp.promp import BasisConfig, DemoSet, RegConfig, learn_em

    paths = []
    for item in args.demos:
        p = Path(item)
        if p.is_dir():
            paths += sorted(p.glob("*.csv"))
        else:
            paths.append(_need_file(item, "demonstration file"))
    if not paths:
        raise InputError("no demonstration CSV files given")
    out = _need_out(args.out)
    demos = DemoSet.from_csv(paths)
    basis = BasisConfig.uniform(args.M, T=args.T)
    p = learn_em(demos, basis, reg=RegConfig(max_iters=args.max_iters))
    p.save(out)
    ll = p.meta.get("loglik_trace", [])
    print(f"learned ProMP D={p.D} M={p.M} from {len(demos)} demonstrations; EM iterations {len(ll)}; wrote {out}")
    return EXIT_OK


# -- adapt ---------------------------------------------------------------------------------------


def cmd_adapt(args) -> int:
    from cpromp.objective import AdaptationProblem, CompiledLagrangian
    from cpromp.optimizer import adapt

    src = _need_file(args.problem, "problem file")
    out = _need_out(args.out)
    diag = _need_out(args.diagnostics) if args.diagnostics else out.with_suffix(".diagnostics.json")
    plot = _need_out(args.plot) if args.plot else None
    problem = AdaptationProblem.load(src, defaults=_constraint_defaults(args), n_grid=args.grid)
    comp = CompiledLagrangian(problem)
    res = adapt(comp, _solver_cfg(args))
    res.adapted.save(out)
    _json_dump(res.diagnostics(), diag)
    if plot is not None:
        _json_dump(plot_data(res.adapted, problem), plot)
    print(f"{res.status}: KL {res.kl:.6g}, max residual {res.max_residual:.3g}, "
          f"{res.iterations} outer iterations; wrote {out}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def plot_data(p, problem=None, n_grid: int | None = None) -> dict:
    """Mean and covariance per grid time for plotting confidence ellipses.

    Task-space points (``end`` of every non-identity chain) are propagated with
    the unscented transform; Cartesian blocks report their first two coordinates.
    """
    from cpromp.kinematics import KinematicChain, task_moments
    from cpromp.promp import marginal_moments

    n_grid = n_grid or (problem.n_grid if problem is not None else 50)
    times = p.basis.grid(n_grid)
    blocks = problem.blocks if problem is not None else (p.D,)
    chains = problem.chains if problem is not None else (KinematicChain.identity(),)
    out = {"times": times, "series": []}
    moments = [marginal_moments(p, t) for t in times]
    o = 0
    for b, (D, chain) in enumerate(zip(blocks, chains)):
        sl = slice(o, o + D)
        o += D
        if chain.is_identity:
            means = [m.mean[sl][:2] for m in moments]
            covs = [m.cov[sl, sl][:2, :2] for m in moments]
            name = f"block{b}"
        else:
            sub = _block_promp(p, sl)
            tm = [task_moments(sub, t, chain, "end", problem.ut if problem is not None else None) for t in times]
            means = [m.mean for m in tm]
            covs = [m.cov for m in tm]
            name = f"block{b}:end"
        out["series"].append({"name": name, "mean": np.array(means), "cov": np.array(covs)})
    return out


def _block_promp(p, sl):
    idx = np.arange(p.n_weights).reshape(p.D, p.M)[sl].reshape(-1)
    D = sl.stop - sl.start
    return p.replace(D=D, mu_w=p.mu_w[idx], Sigma_w=p.Sigma_w[np.ix_(idx, idx)],
                     Sigma_y=p.Sigma_y[sl, sl])


# -- sample --------------------------------------------------------------------------------------


def cmd_sample(args) -> int:
    import csv

    from cpromp.promp import ProMP, sample_trajectories

    src = _need_file(args.promp, "ProMP file")
    out = _need_out(args.out)
    ell = _need_out(args.ellipses) if args.ellipses else None
    p = ProMP.load(src)
    times = p.basis.grid(args.grid or 50)
    X = sample_trajectories(p, args.n, times, seed=args.seed, with_noise=args.noise)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "t"] + [f"q{d + 1}" for d in range(p.D)])
        for i in range(X.shape[0]):
            for k, t in enumerate(times):
                w.writerow([i, repr(float(t))] + [repr(float(v)) for v in X[i, k]])
    if ell is not None:
        _json_dump(plot_data(p, n_grid=len(times)), ell)
    print(f"wrote {args.n} samples x {len(times)} times to {out}")
    return EXIT_OK


# -- bench ---------------------------------------------------------------------------------------


def cmd_bench(args) -> int:
    from cpromp.benchmark import (ROW_FIELDS, SUMMARY_FIELDS, BenchmarkConfig, format_table, run_suite,
                                  write_csv)

    try:
        counts = [int(c) for c in args.counts.split(",") if c.strip()]
    except ValueError:
        raise InputError(f"--counts must be a comma separated list of integers, got {args.counts!r}") from None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = BenchmarkConfig()
    over = {}
    if args.grid is not None:
        over["n_grid"] = args.grid
    if args.eta_default is not None:
        over["eta"] = over["eta_waypoint"] = args.eta_default
    if args.alpha_default is not None:
        over["alpha"] = args.alpha_default
    if args.samples is not None:
        over["n_samples"] = args.samples
    if args.eps_c is not None or args.outer_max is not None:
        kw = {}
        if args.eps_c is not None:
            kw["constraint_tol"] = args.eps_c
        if args.outer_max is not None:
            kw["outer_max_iters"] = args.outer_max
        over["solver"] = dataclasses.replace(cfg.solver, **kw)
    cfg = dataclasses.replace(cfg, **over)

    def progress(row):
        log.info("%s count=%d seed=%d violation=%.4f kl=%.3f", row["kind"], row["count"], row["seed"],
                 row["violation_rate"], row["normalized_kl"])

    rows, summary = run_suite(args.kind, counts, args.n, cfg, seed=args.seed, progress=progress)
    stem = f"{args.kind}_seed{args.seed}"
    write_csv(out_dir / f"{stem}_runs.csv", rows, ROW_FIELDS)
    write_csv(out_dir / f"{stem}_summary.csv", summary, SUMMARY_FIELDS)
    table = format_table(summary)
    (out_dir / f"{stem}_summary.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


# -- check-grad ----------------------------------------------------------------------------------


def cmd_check_grad(args) -> int:
    from cpromp.objective import gradient_check
    from cpromp.scenarios import GRADIENT_FAMILIES, random_gradient_problem

    families = GRADIENT_FAMILIES if args.family == "all" else (args.family,)
    worst = 0.0
    for fam in families:
        if fam not in ("joint_limit", "smoothness") and args.dim < 2:
            print(f"{fam:<17} skipped (needs --dim >= 2)")
            continue
        comp, theta, lam = random_gradient_problem(fam, args.dim, args.M, args.seed, n_grid=args.grid or 12)
        r = gradient_check(comp, theta, lam)
        worst = max(worst, r["rel_error"])
        print(f"{fam:<17} params {r['n_checked']:>5}  max rel error {r['rel_error']:.3e}")
    ok = worst < args.tol
    print(f"max relative gradient error {worst:.3e} ({'ok' if ok else 'FAILED'}, tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_INPUT


# -- example ------------------------------------------------------------------------------------

EXAMPLES = ("limits_toy", "limits_toy_smooth")


def cmd_example(args) -> int:
    from importlib import resources

    out = _need_out(args.out)
    text = resources.files("cpromp").joinpath("data", f"{args.name}.json").read_text()
    out.write_text(text)
    print(f"wrote example problem {args.name} to {out}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--grid", type=int, default=None, help="number of grid times (default 50)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--eps-c", type=float, default=None, help="constraint tolerance for convergence")
    common.add_argument("--outer-max", type=int, default=None, help="cap on outer (multiplier) iterations")
    common.add_argument("--eta-default", type=float, default=None, help="multiplier step for constraints without one")
    common.add_argument("--alpha-default", type=float, default=None, help="confidence for constraints without one")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = _Parser(prog="cpromp", description="Learn, adapt and benchmark probabilistic movement primitives.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn", parents=[common], help="fit a ProMP to demonstration CSV files")
    p.add_argument("demos", nargs="+", help="CSV files (columns t,q1..qD) or directories of them")
    p.add_argument("--out", required=True)
    p.add_argument("--M", type=int, default=15, help="basis functions per coordinate")
    p.add_argument("--T", type=float, default=1.0, help="time horizon the demos are mapped to")
    p.add_argument("--max-iters", type=int, default=200)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("adapt", parents=[common], help="adapt a ProMP to the constraints of a problem file")
    p.add_argument("problem")
    p.add_argument("--out", required=True, help="adapted ProMP JSON")
    p.add_argument("--diagnostics", help="diagnostics JSON (default: <out>.diagnostics.json)")
    p.add_argument("--plot", help="write per-time means and covariances for plotting to this JSON file")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("sample", parents=[common], help="sample trajectories from a ProMP file")
    p.add_argument("promp")
    p.add_argument("--out", required=True, help="samples CSV (columns sample,t,q1..qD)")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--noise", action="store_true", help="add observation noise")
    p.add_argument("--ellipses", help="also write per-time means and covariances to this JSON file")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bench", parents=[common], help="run a randomized 2-D benchmark suite")
    p.add_argument("--kind", required=True, choices=["repeller", "unbound-waypoint", "virtual-wall"])
    p.add_argument("--counts", default="1,2,3")
    p.add_argument("--n", type=int, default=100, help="environments per count")
    p.add_argument("--samples", type=int, default=None, help="trajectories sampled per environment")
    p.add_argument("--out-dir", default="bench_out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("check-grad", parents=[common], help="compare Lagrangian gradients with finite differences")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--M", type=int, default=4)
    p.add_argument("--family", default="all")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("example", parents=[common], help="copy a shipped example problem file")
    p.add_argument("name", choices=EXAMPLES)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_example)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, CProMPError, KeyError, ValueError, OSError, json.JSONDecodeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
