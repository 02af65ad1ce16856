"""Acceptance criteria 1-10.

Each test prints one ``CRITERION k: PASS|FAIL ...`` line; the lines are
repeated together at the end of the pytest run. The file can also be run
directly with ``python tests/test_acceptance.py``.
"""
import functools
import itertools
import json
import sys
import time
import warnings
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import linprog

from npmle.alm import ALMOptions, ALMState, _newton, _Sub, alm_fit, grad_phi, hessian_dense, kkt_residuals, phi
from npmle.cli import main as cli_main
from npmle.denoise import barycentric_project, ot_plan, posterior_mean, total_squared_error
from npmle.em import em_fit, pem_fit, stationarity
from npmle.model import DiscreteDistribution, LikelihoodMatrix, build_likelihood, make_grid
from npmle.prox import ProxContext, prox_h
from npmle.simulate import gen_example1, gen_example3
from npmle.transport import sq_euclidean_cost

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # run as a script
    ACCEPTANCE_LINES = []

DATA = Path(__file__).resolve().parent / "data"
SEED = 0  # fixed for every criterion before any result was seen


def record(k, ok, detail):
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------------------
# 1. Table 1 reproduction
# ---------------------------------------------------------------------------

TABLE1 = {(50, 3.0): 156.0, (50, 5.0): 53.0, (500, 7.0): 16.0}
TABLE1_REPS = 100


def run_table1_cell(tau, nu, reps=TABLE1_REPS):
    totals, etas, reports = [], [], []
    for r in range(reps):
        inst = gen_example1(1000, tau, nu, SEED + r)
        L = build_likelihood(inst.data, make_grid(inst.data, "lattice", counts=[500]))
        x, rep = alm_fit(L)
        prior = DiscreteDistribution(make_grid(inst.data, "lattice", counts=[500]).atoms, x)
        totals.append(total_squared_error(posterior_mean(inst.data, prior), inst.truth_theta))
        etas.append(max(rep.eta1, rep.eta2))
        reports.append((L, x, rep))
    return float(np.mean(totals)), float(np.max(etas)), reports


@functools.lru_cache(maxsize=None)
def table1():
    return {key: run_table1_cell(*key) for key in TABLE1}


def test_criterion_1_table1():
    t0 = time.perf_counter()
    res = table1()
    elapsed = time.perf_counter() - t0
    parts, ok = [], True
    for key, ref in TABLE1.items():
        mean, eta, _ = res[key]
        good = abs(mean - ref) <= 0.15 * ref and eta <= 1e-6
        ok &= good
        parts.append(f"(tau={key[0]},nu={key[1]:g}) {mean:.1f} vs {ref:g} max-eta {eta:.1e}")
    ok &= elapsed < 120
    assert record(1, ok, "; ".join(parts) + f"; {TABLE1_REPS} reps, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 2 and 7. Example 3 with EM and PEM
# ---------------------------------------------------------------------------

TABLE5 = {"a": -6.4542, "b": -4.2673}


@functools.lru_cache(maxsize=None)
def example3(variant):
    inst = gen_example3(variant, 5000, 3, SEED)
    t0 = time.perf_counter()
    em = em_fit(inst.data)
    t1 = time.perf_counter()
    pem = pem_fit(inst.data)
    t2 = time.perf_counter()
    return inst, em, pem, t1 - t0, t2 - t1


@pytest.mark.slow
def test_criterion_2_table5():
    parts, ok = [], True
    for v in "abcd":
        inst, em, pem, te, tp = example3(v)
        em_max = max(em.objective_trace)
        good = pem.loglik >= em.loglik and em.loglik >= em_max - 1e-6
        txt = f"3({v}) PEM {pem.loglik:.4f} EM {em.loglik:.4f}"
        if v in TABLE5:
            near = abs(pem.loglik - TABLE5[v]) <= 0.02
            good &= near
            txt += f" (ref {TABLE5[v]})"
        ok &= good
        parts.append(txt)
    assert record(2, ok, "; ".join(parts))


@pytest.mark.slow
def test_criterion_7_pem_properties():
    parts, ok = [], True
    for v in "abcd":
        inst, em, pem, _, _ = example3(v)
        mono = float(np.min(np.diff(pem.objective_trace))) >= -1e-12
        s_pem = int(np.sum(pem.x > 1e-8))
        s_em = int(np.sum(em.x > 0))
        g_mu, g_x = stationarity(pem.x, pem.mu, inst.data)
        good = mono and s_pem < s_em and g_mu <= 1e-4 and g_x <= 1e-4
        ok &= good
        parts.append(f"3({v}) mono={mono} support {s_pem}<{s_em} grad-mu {g_mu:.1e} grad-x {g_x:.1e}")
    assert record(7, ok, "; ".join(parts))


# ---------------------------------------------------------------------------
# 3. Solver cross-validation on tiny instances
# ---------------------------------------------------------------------------

def test_criterion_3_cross_validation():
    oracle = json.loads((DATA / "mg_oracle.json").read_text())
    rng = np.random.default_rng(SEED)
    worst_gap, worst_search, ok = 0.0, -np.inf, True
    for inst in oracle["instances"]:
        A = np.array(inst["L"])
        n, m = A.shape
        x, rep = alm_fit(A)
        f = float(np.mean(np.log(A @ x)))
        gap = abs(f - inst["objective"])
        W = rng.dirichlet(np.ones(m), 100_000)
        best_random = float(np.max(np.mean(np.log(W @ A.T), axis=1)))
        worst_gap = max(worst_gap, gap)
        worst_search = max(worst_search, best_random - f)
        ok &= gap <= 1e-8 and best_random <= f
    assert len(oracle["instances"]) == 50 and oracle["iterations"] >= 10**6
    assert record(3, ok, f"max |ALM - MG oracle| {worst_gap:.1e}; max(random search - ALM) {worst_search:.1e}")


# ---------------------------------------------------------------------------
# 4. Prox, gradient and Hessian numerics
# ---------------------------------------------------------------------------

def prox_residual(w, ctx):
    z = Fraction(float(prox_h(w, ctx)))
    w, q = Fraction(float(w)), 1 / (Fraction(ctx.sigma) * ctx.n)
    return float(abs(z * (z - w) - q) / max(z * z, abs(w * z), q))


def smooth_state(rng, n, m, margin):
    # a state whose max(., 0) arguments stay at least ``margin`` away from zero
    A = rng.uniform(0.05, 1.0, (n, m))
    L = LikelihoodMatrix.from_matrix(A)
    sigma = float(rng.uniform(1, 100))
    # v <= 1/2 keeps (1/n) L^T v - 1 <= -1/2, so columns left at x = 0 stay inactive
    v = rng.uniform(0.1, 0.5, n)
    y = rng.uniform(0.5, 1.5, n) / n
    z0 = L.rdot(v) / n - 1.0
    target = rng.choice([-1.0, 1.0], m) * rng.uniform(margin, 1.0, m)
    x = sigma * np.maximum(target - z0, 0.0)
    st = ALMState(x, y, v.copy(), v, sigma)
    z = L.rdot(v) / n - 1.0 + x / sigma
    return L, st, float(np.min(np.abs(z)))


def test_criterion_4_numerics():
    rng = np.random.default_rng(SEED)
    prox_worst = 0.0
    for _ in range(2000):
        ctx = ProxContext(float(10 ** rng.uniform(-3, 10)), int(rng.integers(1, 10**5)))
        w = float(rng.normal() * 10 ** rng.uniform(-3, 6))
        prox_worst = max(prox_worst, prox_residual(w, ctx))
    grad_worst = hess_worst = 0.0
    for _ in range(100):
        n, m = int(rng.integers(3, 20)), int(rng.integers(2, 10))
        L, st, gap = smooth_state(rng, n, m, 0.05)
        v = st.v
        g = grad_phi(v, st, L)
        h = 1e-6
        fd = np.array([(phi(v + h * e, st, L) - phi(v - h * e, st, L)) / (2 * h) for e in np.eye(n)])
        grad_worst = max(grad_worst, np.linalg.norm(fd - g) / np.linalg.norm(g))
        p = rng.normal(size=n)
        t = min(1e-6, 0.1 * gap / max(1e-300, np.max(np.abs(L.rdot(p))) / n))
        Hp = hessian_dense(v, st, L) @ p
        fdh = (grad_phi(v + t * p, st, L) - grad_phi(v - t * p, st, L)) / (2 * t)
        hess_worst = max(hess_worst, np.linalg.norm(fdh - Hp) / np.linalg.norm(Hp))
    ok = prox_worst <= 1e-12 and grad_worst <= 1e-6 and hess_worst <= 1e-5
    assert record(4, ok, f"prox residual {prox_worst:.1e}; grad rel {grad_worst:.1e}; Hp rel {hess_worst:.1e}")


# ---------------------------------------------------------------------------
# 5. Newton solver paths
# ---------------------------------------------------------------------------

def active_state(rng, n, s, m=None):
    """State with exactly s active columns of an n x m matrix."""
    m = m or s + 5
    A = rng.uniform(0.01, 1.0, (n, m))
    L = LikelihoodMatrix.from_matrix(A)
    sigma = 50.0
    # entries are at most 1 after row scaling, so v <= 1 keeps (1/n) L^T v - 1 < 0 off the first s columns
    v = rng.uniform(0.2, 1.0, n)
    z0 = L.rdot(v) / n - 1.0
    x = np.zeros(m)
    x[:s] = sigma * (1.0 - z0[:s] + rng.uniform(0.1, 1.0, s))
    y = rng.uniform(0.5, 1.5, n) / n
    return L, ALMState(x, y, v.copy(), v, sigma)


def direction(L, st, path, opts):
    sub = _Sub(st, L)
    z, w = sub.parts(st.v, L.rdot(st.v))
    g = sub.grad(z, w)
    return _newton(sub, z, w, g, opts, path)


def test_criterion_5_solver_paths():
    rng = np.random.default_rng(SEED)
    # the CG forcing term is tightened here so that all three paths solve the same system exactly
    opts = ALMOptions(eta_bar=1e-15, cg_maxiter=50_000)
    worst = 0.0
    sizes_ok = True
    for _ in range(20):
        n = int(rng.integers(20, 400))
        s = int(rng.integers(1, n))
        L, st = active_state(rng, n, s)
        dirs = {p: direction(L, st, p, opts) for p in ("direct", "smw", "cg")}
        sizes_ok &= all(ws.s == s and ws.solver_path == p for p, (_, ws) in dirs.items())
        ref = dirs["direct"][0]
        for d, _ in dirs.values():
            worst = max(worst, np.linalg.norm(d - ref) / np.linalg.norm(ref))
    times = {}
    n = 5000
    for s in (500, 1000):
        L, st = active_state(rng, n, s)
        best = np.inf
        for _ in range(5):
            t0 = time.perf_counter()
            direction(L, st, "smw", ALMOptions())
            best = min(best, time.perf_counter() - t0)
        times[s] = best
    ratio = times[1000] / times[500]
    ok = sizes_ok and worst <= 1e-8 and 4 / 1.5 <= ratio <= 4 * 1.5
    assert record(5, ok, f"max relative direction gap {worst:.1e}; SMW time ratio s=1000/500 at n=5000: {ratio:.2f}")


# ---------------------------------------------------------------------------
# 6. ALM invariants
# ---------------------------------------------------------------------------

def test_criterion_6_alm_invariants():
    runs = [r for cell in table1().values() for r in cell[2]]
    oracle = json.loads((DATA / "mg_oracle.json").read_text())
    for inst in oracle["instances"]:
        A = np.array(inst["L"])
        L = LikelihoodMatrix.from_matrix(A)
        x, rep = alm_fit(L)
        runs.append((L, x, rep))
    descent = xpos = sigma_mono = feas = True
    worst_feas = worst_scale = 0.0
    for L, x, rep in runs:
        tr = rep.trace
        descent &= all(tr["descent"])
        xpos &= min(tr["x_min"]) >= 0.0
        sigma_mono &= bool(np.all(np.diff(tr["sigma"]) >= 0))
        if rep.converged:
            worst_feas = max(worst_feas, rep.dual_infeas, rep.dual_gap)
        raw = L.values * np.exp(L.log_norms)[:, None]
        e_raw = kkt_residuals(raw, x)[0]
        e_scaled = kkt_residuals(L.values, x)[0]
        worst_scale = max(worst_scale, abs(e_raw - e_scaled))
    feas = worst_feas <= 1e-6
    converged = all(rep.converged for _, _, rep in runs)
    ok = descent and xpos and sigma_mono and feas and converged and worst_scale <= 1e-12
    assert record(6, ok, f"{len(runs)} runs: descent={descent} x>=0={xpos} sigma-monotone={sigma_mono} "
                         f"dual-feas {worst_feas:.1e} eta1 scaling gap {worst_scale:.1e}")


# ---------------------------------------------------------------------------
# 8. Optimal transport
# ---------------------------------------------------------------------------

def lp_cost(X, atoms, weights):
    n, k = X.shape[0], atoms.shape[0]
    C = sq_euclidean_cost(X, atoms)
    A = np.zeros((n + k, n * k))
    for i in range(n):
        A[i, i * k:(i + 1) * k] = 1
    for j in range(k):
        A[n + j, j::k] = 1
    res = linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([np.full(n, 1 / n), weights]), method="highs")
    return res.fun


def test_criterion_8_transport():
    rng = np.random.default_rng(SEED)
    lp_gap = hung_gap = cert = 0.0
    hull = True
    solves = 0
    for _ in range(50):
        n, k, d = int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        X = rng.normal(size=(n, d))
        prior = DiscreteDistribution(rng.normal(0, 2, (k, d)), rng.dirichlet(np.ones(k)))
        plan = ot_plan(X, prior)
        lp_gap = max(lp_gap, abs(plan.cost - lp_cost(X, plan.atoms, plan.col_marginal)))
        cert = max(cert, plan.dual_violation, plan.slackness_gap)
        T = barycentric_project(plan)
        hull &= bool(np.all(T >= plan.atoms.min(0) - 1e-12) and np.all(T <= plan.atoms.max(0) + 1e-12))
        solves += 1
    for n in range(1, 8):
        for _ in range(3):
            X = rng.normal(size=(n, 2))
            A = rng.normal(size=(n, 2))
            plan = ot_plan(X, DiscreteDistribution(A, np.full(n, 1 / n)))
            C = sq_euclidean_cost(X, A)
            best = min(C[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n))) / n
            hung_gap = max(hung_gap, abs(plan.cost - best))
            cert = max(cert, plan.dual_violation, plan.slackness_gap)
            T = barycentric_project(plan)
            hull &= bool(np.all(T >= A.min(0) - 1e-12) and np.all(T <= A.max(0) + 1e-12))
            solves += 1
    ok = lp_gap <= 1e-9 and hung_gap <= 1e-9 and cert <= 1e-9 and hull
    assert record(8, ok, f"{solves} solves: LP gap {lp_gap:.1e}; assignment gap {hung_gap:.1e}; "
                         f"certificate {cert:.1e}; hull={hull}")


# ---------------------------------------------------------------------------
# 9. Structural trend for the transport map
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_9_ot_trend():
    risks = []
    for n in (500, 2000, 8000):
        inst = gen_example3("b", n, 3, SEED)
        grid = make_grid(inst.data, "data", zero_diagonal=True)
        L = build_likelihood(inst.data, grid)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            x, _ = alm_fit(L)
        del L
        prior = DiscreteDistribution(grid.atoms, x).pruned(1e-12).normalized()
        T = barycentric_project(ot_plan(inst.data, prior))
        risks.append(float(np.mean(np.sum(T**2, axis=1))))
    ok = risks[0] >= risks[1] >= risks[2]
    assert record(9, ok, "(1/n) sum ||T(Y_i)||^2 at n=500,2000,8000: " + ", ".join(f"{r:.4f}" for r in risks))


# ---------------------------------------------------------------------------
# 10. Determinism
# ---------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    spec = {
        "cells": [
            {"example": "1", "n": 300, "m": 100, "tau": 15, "nu": 4},
            {"example": "2", "n": 300, "m": 60},
            {"example": "3b", "n": 200, "d": 3},
            {"example": "3c", "n": 200, "d": 3, "solver": "pem"},
        ],
        "reps": 2,
        "seed": SEED,
    }
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    outs = []
    for k in range(2):
        code = cli_main(["benchmark", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / f"r{k}")])
        assert code == 0
        outs.append((tmp_path / f"r{k}" / "benchmark.csv").read_bytes())
    ok = outs[0] == outs[1]
    rows = outs[0].count(b"\n") - 1
    assert record(10, ok, f"two replays, {len(outs[0])} bytes, {rows} rows, identical={ok}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
