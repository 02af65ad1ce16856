"""Command-line front end: simulate, fit, denoise, eval, benchmark.

Exit codes: 0 success, 2 finished without meeting the tolerance, 1 usage or
input error.
"""
import argparse
import contextlib
import io as _io
import itertools
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import io
from .alm import ALMOptions, alm_fit, kkt_residuals
from .denoise import barycentric_project, mse, ot_plan, posterior_mean
from .em import EMOptions, em_fit, pem_fit
from .errors import NPMLEError
from .model import (
    Dataset,
    DiscreteDistribution,
    LikelihoodMatrix,
    build_likelihood,
    log_likelihood,
    make_grid,
)
from .simulate import gen_example1, gen_example2, gen_example3

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


class UsageError(NPMLEError, ValueError):
    pass


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(args):
    if not args.data:
        raise UsageError("--data is required")
    Y = io.read_csv_matrix(args.data)
    cov = io.parse_cov(args.cov, *Y.shape)
    return Dataset(Y, cov)


def _parse_grid(spec, data, zero_diag):
    """Support grid from ``lattice:<c1>x<c2>...``, ``data[,zero-diag]`` or ``file:<path>``."""
    spec = spec or "data"
    kind, _, arg = spec.partition(":")
    if kind.startswith("data"):
        flags = kind.split(",")[1:]
        if any(f != "zero-diag" for f in flags):
            raise UsageError(f"unknown grid option in {spec!r}")
        return make_grid(data, "data", zero_diagonal=zero_diag or "zero-diag" in flags)
    if zero_diag:
        raise UsageError("--zero-diag is only valid with the data-as-atoms grid")
    if kind == "lattice":
        try:
            counts = [int(c) for c in arg.lower().split("x")]
        except ValueError:
            raise UsageError(f"bad lattice counts {arg!r}") from None
        return make_grid(data, "lattice", counts=counts)
    if kind == "file":
        atoms = io.read_csv_matrix(arg)
        return make_grid(data, "explicit", atoms=atoms)
    raise UsageError(f"unknown grid spec {spec!r}")


def _alm_options(args):
    kw = {}
    if args.tol is not None:
        kw["tol"] = args.tol
    if args.max_iter is not None and args.solver == "alm":
        kw["max_outer"] = args.max_iter
    if args.sigma0 is not None:
        kw["sigma0"] = args.sigma0
    if args.init is not None:
        kw["init"] = args.init
    if args.lowrank is not None:
        kw["use_lowrank"] = True
        kw["lowrank_tol"] = float(args.lowrank)
    return ALMOptions(**kw)


def _summary(rep):
    keys = ["solver", "n", "m", "loglik", "eta1", "eta2", "support_size", "outer_iters", "ssn_iters", "wall_time_ms", "converged"]
    width = max(len(k) for k in keys)
    lines = []
    for k in keys:
        if k in rep:
            v = rep[k]
            if isinstance(v, float):
                v = f"{v:.10g}"
            lines.append(f"{k.ljust(width)}  {v}")
    return "\n".join(lines) + "\n"


@contextlib.contextmanager
def _threads(n):
    if n:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=int(n)):
            yield
    else:
        yield


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def fit_report(data, grid, solver, aopts, max_iter=None, family="location", L=None):
    """Run one solver and collect the report fields."""
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if solver == "alm":
            if L is None:
                L = build_likelihood(data, grid, family=family)
            x, r = alm_fit(L, aopts)
            atoms = None if grid is None else grid.atoms
            rep = dict(
                loglik=r.loglik, eta1=r.eta1, eta2=r.eta2, support_size=r.support_size,
                outer_iters=r.outer_iters, ssn_iters=r.ssn_iters, cg_iters=r.cg_iters,
                converged=r.converged,
            )
        else:
            if family != "location":
                raise UsageError("EM and PEM fit location mixtures only")
            eopts = EMOptions(alm=aopts)
            if max_iter is not None:
                eopts.max_iter = max_iter
            init = (None, grid.atoms)
            if solver == "em":
                st = em_fit(data, init, eopts)
                ssn = 0
            elif solver == "pem":
                if grid.origin == "data":
                    init = None
                st = pem_fit(data, init, eopts)
                ssn = sum(r.ssn_iters for r in st.info["alm_reports"])
            else:
                raise UsageError(f"unknown solver {solver!r}")
            x, atoms = st.x, st.mu
            Lmu = build_likelihood(data, make_grid(data, "explicit", atoms=atoms))
            e1, e2 = kkt_residuals(Lmu, x)
            rep = dict(
                loglik=st.loglik, eta1=e1, eta2=e2,
                support_size=int(np.sum(x > (aopts.support_threshold if solver == "pem" else 0.0))),
                outer_iters=st.iters, ssn_iters=ssn, cg_iters=0, converged=st.converged,
                objective_trace=list(st.objective_trace),
            )
    rep["wall_time_ms"] = (time.perf_counter() - t0) * 1e3
    rep["solver"] = solver
    rep["atoms"] = None if atoms is None else np.asarray(atoms)
    rep["weights"] = np.asarray(x)
    return rep


def cmd_fit(args):
    aopts = _alm_options(args)
    family = args.family
    if args.matrix:
        if args.data or args.grid:
            raise UsageError("--matrix cannot be combined with --data or --grid")
        if args.solver != "alm":
            raise UsageError("an explicit matrix can only be fitted with --solver alm")
        A = io.read_csv_matrix(args.matrix)
        if np.any(A < 0):
            raise UsageError("likelihood matrix entries must be nonnegative")
        L = LikelihoodMatrix.from_matrix(A)
        rep = fit_report(None, None, "alm", aopts, L=L)
        rep["n"], rep["m"] = L.shape
    else:
        data = _load_data(args)
        if family == "scale":
            if not args.grid or not args.grid.startswith("file:"):
                raise UsageError("scale family needs --grid file:<variances>")
        grid = _parse_grid(args.grid, data, args.zero_diag)
        rep = fit_report(data, grid, args.solver, aopts, args.max_iter, family)
        rep["n"], rep["m"] = data.n, grid.m
        rep["family"] = family
    rep = {k: rep[k] for k in ["atoms", "weights"]} | {k: v for k, v in rep.items() if k not in ("atoms", "weights")}
    out = _out_dir(args)
    io.write_report(out / "prior.json", rep)
    text = _summary(rep)
    (out / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if rep["converged"] else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# denoise / eval
# ---------------------------------------------------------------------------

def cmd_denoise(args):
    if not args.prior:
        raise UsageError("--prior is required")
    rep = io.read_report(args.prior)
    prior = io.prior_from_report(rep).normalized()
    data = _load_data(args)
    if prior.d != data.d:
        raise UsageError(f"prior has dimension {prior.d}, data has {data.d}")
    out = _out_dir(args)
    truth = None
    if args.truth:
        truth = io.read_csv_matrix(args.truth)
        if truth.shape != data.points.shape:
            raise UsageError(f"truth has shape {truth.shape}, data has {data.points.shape}")
    which = ["eb", "ot"] if args.denoiser == "both" else [args.denoiser]
    section = {}
    for name in which:
        if name == "eb":
            est = posterior_mean(data, prior)
        else:
            plan = ot_plan(data, prior)
            est = barycentric_project(plan)
            section["w2sq"] = plan.cost
        io.write_csv_matrix(out / f"{name}.csv", est, header=name)
        if truth is not None:
            m = mse(est, truth)
            section[name] = {"mse": m, "total_se": m * data.n}
    rep.setdefault("denoise", {}).update(section)
    io.write_report(out / "report.json", rep)
    for name in which:
        if truth is not None:
            s = section[name]
            print(f"{name}: mse {s['mse']:.10g}  total {s['total_se']:.10g}")
        else:
            print(f"{name}: wrote {out / (name + '.csv')}")
    return EXIT_OK


def cmd_eval(args):
    res = {}
    if args.estimates:
        if not args.truth:
            raise UsageError("--estimates needs --truth")
        E = io.read_csv_matrix(args.estimates)
        T = io.read_csv_matrix(args.truth)
        if E.shape != T.shape:
            raise UsageError(f"estimates have shape {E.shape}, truth has {T.shape}")
        m = mse(E, T)
        res.update(mse=m, total_se=m * E.shape[0])
    if args.prior:
        rep = io.read_report(args.prior)
        prior = io.prior_from_report(rep).normalized()
        data = _load_data(args)
        L = build_likelihood(data, make_grid(data, "explicit", atoms=prior.atoms))
        e1, e2 = kkt_residuals(L, prior.weights)
        res.update(loglik=log_likelihood(L, prior.weights), eta1=e1, eta2=e2)
        if args.reference:
            ref = io.prior_from_report(io.read_report(args.reference)).normalized()
            from .denoise import wasserstein2_sq

            res["w2sq"] = wasserstein2_sq(prior, ref)
    if not res:
        raise UsageError("nothing to evaluate: give --estimates/--truth or --prior/--data")
    text = json.dumps(res, indent=2) + "\n"
    if args.out:
        out = _out_dir(args)
        io.write_report(out / "eval.json", res)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _instance(example, n, seed, tau=None, nu=None, d=3, m=None):
    ex = str(example).lower()
    if ex == "1":
        return gen_example1(n, tau, nu, seed)
    if ex == "2":
        return gen_example2(n, seed, m or 400)
    if ex in ("3a", "3b", "3c", "3d"):
        return gen_example3(ex[1], n, d, seed)
    raise UsageError(f"unknown example {example!r}")


def _prior_json(prior):
    if isinstance(prior, DiscreteDistribution):
        return {"kind": "discrete", "atoms": prior.atoms, "weights": prior.weights}
    return prior


def cmd_simulate(args):
    if args.example == "1" and (args.tau is None or args.nu is None):
        raise UsageError("example 1 needs --tau and --nu")
    inst = _instance(args.example, args.n, args.seed, args.tau, args.nu, args.d, args.m)
    out = _out_dir(args)
    io.write_csv_matrix(out / "data.csv", inst.data.points, header="observations")
    io.write_csv_matrix(out / "truth.csv", inst.truth_theta, header="latent means")
    desc = {"example": args.example, "n": args.n, "seed": args.seed, "truth_prior": _prior_json(inst.truth_prior)}
    if "grid" in inst.extra:
        io.write_csv_matrix(out / "grid.csv", inst.extra["grid"], header="variance grid")
        desc["labels"] = inst.extra["labels"]
    io.write_report(out / "truth_prior.json", desc)
    print(f"wrote {out / 'data.csv'} (n={inst.data.n}, d={inst.data.d})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

BENCH_COLUMNS = ["example", "n", "m", "solver", "replication", "loglik", "eta1", "eta2", "support", "mse", "total_se", "time_ms", "params"]


def _cells(spec):
    if "cells" in spec:
        return [dict(c) for c in spec["cells"]]
    keys = [k for k in ("example", "n", "m", "tau", "nu", "d", "solver") if k in spec]
    vals = [spec[k] if isinstance(spec[k], list) else [spec[k]] for k in keys]
    return [dict(zip(keys, combo)) for combo in itertools.product(*vals)]


def _params(cell):
    skip = ("example", "n", "m", "solver")
    return ";".join(f"{k}={cell[k]}" for k in sorted(cell) if k not in skip)


def run_cell(cell, rep_idx, seed, aopts, timing=False):
    """One benchmark row."""
    ex = str(cell["example"]).lower()
    n = int(cell["n"])
    solver = cell.get("solver", "alm")
    d = int(cell.get("d", 3))
    inst = _instance(ex, n, seed, cell.get("tau"), cell.get("nu"), d, cell.get("m"))
    data = inst.data
    family = "location"
    if ex == "1":
        grid = make_grid(data, "lattice", counts=[int(cell.get("m", 500))])
    elif ex == "2":
        grid = make_grid(data, "explicit", atoms=inst.extra["grid"][:, None])
        family = "scale"
    else:
        zd = bool(cell.get("zero_diag", d >= 3)) and solver == "alm"
        grid = make_grid(data, "data", zero_diagonal=zd)
    t0 = time.perf_counter()
    rep = fit_report(data, grid, solver, aopts, cell.get("max_iter"), family)
    elapsed = (time.perf_counter() - t0) * 1e3
    m_err = tot = ""
    if ex != "2":
        prior = DiscreteDistribution(rep["atoms"], rep["weights"]).normalized()
        est = posterior_mean(data, prior)
        e = mse(est, inst.truth_theta)
        m_err, tot = io.fmt(e), io.fmt(e * n)
    return [
        ex, str(n), str(grid.m), solver, str(rep_idx),
        io.fmt(rep["loglik"]), io.fmt(rep["eta1"]), io.fmt(rep["eta2"]),
        str(rep["support_size"]), m_err, tot,
        io.fmt(elapsed) if timing else "",
        _params(cell),
    ]


def cmd_benchmark(args):
    if not args.spec:
        raise UsageError("--spec is required")
    try:
        spec = json.loads(Path(args.spec).read_text())
    except OSError as exc:
        raise io.ParseError(f"cannot read file ({exc.strerror})", args.spec) from exc
    except json.JSONDecodeError as exc:
        raise io.ParseError(f"invalid JSON: {exc.msg}", args.spec, exc.lineno) from None
    reps = int(spec.get("reps", 1))
    base = int(spec.get("seed", args.seed or 0))
    aopts = _alm_options(args)
    timing = args.timing == "wall"
    buf = _io.StringIO()
    buf.write(",".join(BENCH_COLUMNS) + "\n")
    for cell in _cells(spec):
        for r in range(reps):
            row = run_cell(cell, r, base + r, aopts, timing)
            buf.write(",".join(row) + "\n")
    out = _out_dir(args)
    (out / "benchmark.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _common(p):
    p.add_argument("--data", help="observations CSV (n rows of d floats)")
    p.add_argument("--cov", default=None, help="iso:<v> | diag:<path> | full:<path> (default iso:1)")
    p.add_argument("--threads", type=int, default=None, help="bound for BLAS threads")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=0)


def _solver_flags(p):
    p.add_argument("--solver", choices=["alm", "em", "pem"], default="alm")
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--sigma0", type=float, default=None)
    p.add_argument("--init", choices=["uniform", "hard"], default=None)
    p.add_argument("--lowrank", nargs="?", const="1e-10", default=None, metavar="TOL")


def build_parser():
    p = _Parser(prog="npmle", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic example")
    _common(s)
    s.add_argument("--example", required=True, choices=["1", "2", "3a", "3b", "3c", "3d"])
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--tau", type=int, default=None, help="example 1: number of nonzero means")
    s.add_argument("--nu", type=float, default=None, help="example 1: nonzero mean value")
    s.add_argument("--d", type=int, default=3, help="example 3: dimension")
    s.add_argument("--m", type=int, default=None, help="example 2: variance-grid size")

    f = sub.add_parser("fit", help="estimate the mixing distribution")
    _common(f)
    _solver_flags(f)
    f.add_argument("--matrix", help="explicit n x m likelihood matrix CSV")
    f.add_argument("--grid", help="lattice:<c1>x<c2>... | data[,zero-diag] | file:<path>")
    f.add_argument("--zero-diag", action="store_true", help="zero the diagonal (data-as-atoms grid only)")
    f.add_argument("--family", choices=["location", "scale"], default="location")

    d = sub.add_parser("denoise", help="denoise observations under a fitted prior")
    _common(d)
    d.add_argument("--prior", help="prior JSON written by fit")
    d.add_argument("--denoiser", choices=["eb", "ot", "both"], default="eb")
    d.add_argument("--truth", help="true means CSV, for error reporting")

    e = sub.add_parser("eval", help="score estimates or a fitted prior")
    _common(e)
    e.add_argument("--estimates")
    e.add_argument("--truth")
    e.add_argument("--prior")
    e.add_argument("--reference", help="second prior JSON for a Wasserstein-2 comparison")

    b = sub.add_parser("benchmark", help="run a grid of synthetic experiments")
    _common(b)
    _solver_flags(b)
    b.add_argument("--spec", help="benchmark JSON spec")
    b.add_argument("--timing", choices=["off", "wall"], default="off",
                   help="fill time_ms with wall-clock times (breaks byte-identical replays)")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "benchmark": cmd_benchmark,
}


def _normalize_argv(argv):
    # accept --lowrank:<tol> as well as --lowrank=<tol>
    return [a.replace("--lowrank:", "--lowrank=", 1) if a.startswith("--lowrank:") else a for a in argv]


def main(argv=None):
    argv = _normalize_argv(sys.argv[1:] if argv is None else list(argv))
    args = build_parser().parse_args(argv)
    try:
        with _threads(args.threads):
            return COMMANDS[args.command](args)
    except (NPMLEError, OSError) as exc:
        print(f"npmle {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
