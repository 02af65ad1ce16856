"""Dual augmented Lagrangian method with a semismooth Newton inner solver.

The fixed-grid problem  max_x (1/n) sum_i log (Lx)_i  over the simplex is
solved through its dual

    min_{u, v}  -(1/n) sum_i log u_i   s.t.  (1/n) L^T v <= 1,  u = v,

with multipliers x (inequality) and y (equality). Each outer step minimizes

    phi(v) = (sigma/2) ||max((1/n) L^T v - 1 + x/sigma, 0)||^2 + M_h(v - y/sigma)

by a semismooth Newton method, then updates x and y in closed form.
"""
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.sparse.linalg import LinearOperator, cg

from .errors import DomainError
from .model import LikelihoodMatrix, log_likelihood, low_rank_approx
from .prox import (
    ProxContext,
    clarke_max_diag,
    moreau_env_h,
    one_minus_dprox,
    prox_h,
    w_minus_prox,
)

DIRECT_MAX = 5000


@dataclass
class ALMOptions:
    tol: float = 1e-6
    max_outer: int = 100
    max_ssn: int = 100
    sigma0: float = 100.0
    init: str = "uniform"
    use_lowrank: bool = False
    lowrank_tol: float = 1e-10
    support_threshold: float = 1e-8
    # schedule constants
    eps0: float = 0.5
    eps_factor: float = 1.06
    ssn_fast: int = 30
    sigma_factor: float = np.sqrt(3.0)
    sigma_ratio: float = 0.6
    sigma_max: float = 1e12
    # Newton constants
    eta_bar: float = 0.1
    tau: float = 0.1
    mu: float = 1e-4
    beta: float = 0.5
    max_backtrack: int = 50
    cg_maxiter: int = 500
    direct_max: int = DIRECT_MAX
    solver_path: str = None
    require_dual_feasible: bool = True
    inner_rule: str = "y"


@dataclass
class ALMState:
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    sigma: float
    eps: float = 0.5
    outer_iter: int = 0
    total_ssn_iters: int = 0
    chi_prev: float = np.inf

    @property
    def n(self):
        return self.v.size


@dataclass
class NewtonWorkspace:
    active: np.ndarray
    s: int
    D: np.ndarray
    direction: np.ndarray
    solver_path: str
    cg_iters: int = 0
    residual: float = 0.0
    flag: str = ""


@dataclass
class SolveReport:
    eta1: float
    eta2: float
    loglik: float
    support_size: int
    outer_iters: int
    ssn_iters: int
    cg_iters: int
    wall_time_ms: float
    converged: bool
    dual_infeas: float = np.nan
    dual_gap: float = np.nan
    trace: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "eta1": self.eta1,
            "eta2": self.eta2,
            "loglik": self.loglik,
            "support_size": self.support_size,
            "outer_iters": self.outer_iters,
            "ssn_iters": self.ssn_iters,
            "cg_iters": self.cg_iters,
            "wall_time_ms": self.wall_time_ms,
            "converged": self.converged,
        }


# ---------------------------------------------------------------------------
# subproblem
# ---------------------------------------------------------------------------

class _Sub:
    """Fixed data of one ALM subproblem with incremental evaluation."""

    def __init__(self, state, L):
        self.L = L
        self.n = L.n
        self.sigma = float(state.sigma)
        self.x = state.x
        self.y = state.y
        self.ctx = ProxContext(self.sigma, self.n)
        self.shift = self.x / self.sigma - 1.0
        self.ysig = self.y / self.sigma

    def parts(self, v, Ltv):
        z = Ltv / self.n + self.shift
        w = v - self.ysig
        return z, w

    def value(self, z, w):
        zp = np.maximum(z, 0.0)
        return 0.5 * self.sigma * float(zp @ zp) + moreau_env_h(w, self.ctx)

    def grad(self, z, w):
        zp = np.maximum(z, 0.0)
        return (self.sigma / self.n) * self.L.dot(zp) + self.sigma * w_minus_prox(w, self.ctx)


def phi(v, state, L):
    """Subproblem objective at v."""
    sub = _Sub(state, L)
    v = np.asarray(v, dtype=float)
    return sub.value(*sub.parts(v, L.rdot(v)))


def grad_phi(v, state, L):
    """Gradient of the subproblem objective at v."""
    sub = _Sub(state, L)
    v = np.asarray(v, dtype=float)
    return sub.grad(*sub.parts(v, L.rdot(v)))


def hessian_dense(v, state, L):
    """Generalized Hessian as a dense n x n matrix (testing helper)."""
    sub = _Sub(state, L)
    v = np.asarray(v, dtype=float)
    z, w = sub.parts(v, L.rdot(v))
    J = np.flatnonzero(clarke_max_diag(z))
    B = L.columns(J) / sub.n
    return sub.sigma * (B @ B.T + np.diag(one_minus_dprox(w, sub.ctx)))


def _choose_path(n, s, direct_max):
    if s == 0:
        return "diag"
    if s <= min(n, direct_max) and s < n:
        return "smw"
    if n <= direct_max:
        return "direct"
    return "cg"


def _newton(sub, z, w, g, opts, path=None):
    n, sigma = sub.n, sub.sigma
    J = np.flatnonzero(clarke_max_diag(z))
    s = J.size
    D = one_minus_dprox(w, sub.ctx)
    gnorm = float(np.linalg.norm(g))
    bound = min(opts.eta_bar, gnorm ** (1.0 + opts.tau))
    path = path or opts.solver_path or _choose_path(n, s, opts.direct_max)
    if s == 0:
        path = "diag"
    rhs = -g / sigma
    ws = NewtonWorkspace(J, s, D, None, path)
    d = None
    if path == "diag":
        d = rhs / D
    elif path in ("smw", "direct"):
        B = sub.L.columns(J) / n
        try:
            if path == "smw":
                Bs = B / np.sqrt(D)[:, None]
                K = Bs.T @ Bs
                K[np.diag_indices_from(K)] += 1.0
                c = cho_factor(K, lower=True, check_finite=False)
                t = rhs / D
                d = t - (B @ cho_solve(c, B.T @ t, check_finite=False)) / D
            else:
                K = B @ B.T
                K[np.diag_indices_from(K)] += D
                c = cho_factor(K, lower=True, check_finite=False)
                d = cho_solve(c, rhs, check_finite=False)
            if not np.all(np.isfinite(d)):
                raise LinAlgError("non-finite direction")
        except LinAlgError:
            ws.flag = "factorization failed; used cg"
            path = ws.solver_path = "cg"
            d = None
    if path == "cg":
        B = sub.L.columns(J) / n

        def mv(p):
            return D * p + B @ (B.T @ p)

        A = LinearOperator((n, n), matvec=mv, dtype=float)
        pre = D + np.einsum("ij,ij->i", B, B)
        M = LinearOperator((n, n), matvec=lambda r: r / pre, dtype=float)
        # both forcing terms of the inexact Newton step, scaled to this system
        atol = min(bound, min(0.1, gnorm) * gnorm) / sigma
        count = [0]

        def cb(_):
            count[0] += 1

        d, info = cg(A, rhs, rtol=0.0, atol=atol, maxiter=opts.cg_maxiter, M=M, callback=cb)
        ws.cg_iters = count[0]
        ws.residual = float(sigma * np.linalg.norm(mv(d) - rhs))
        if info != 0:
            ws.flag = "cg reached its iteration cap"
    if not float(d @ g) < 0:
        d = -g
        ws.flag = (ws.flag + "; " if ws.flag else "") + "replaced by steepest descent"
    ws.direction = d
    return d, ws


def newton_direction(v, grad, state, L, path=None, opts=None):
    """Semismooth Newton direction solving H d = -grad.

    ``path`` forces one of ``"diag"``, ``"smw"``, ``"direct"`` or ``"cg"``;
    by default it is chosen from the active-set size.
    """
    opts = opts or ALMOptions()
    sub = _Sub(state, L)
    v = np.asarray(v, dtype=float)
    z, w = sub.parts(v, L.rdot(v))
    return _newton(sub, z, w, np.asarray(grad, dtype=float), opts, path)


def ssn_solve(state, L, inner_tol, opts=None, record=None):
    """Minimize the subproblem from ``state.v`` with Armijo-damped Newton steps.

    Returns ``(v, u, iters, info)``; ``info`` holds the final gradient norm, CG
    iteration count and a convergence flag.
    """
    opts = opts or ALMOptions()
    sub = _Sub(state, L)
    v = np.array(state.v, dtype=float)
    Ltv = L.rdot(v)
    z, w = sub.parts(v, Ltv)
    f = sub.value(z, w)
    g = sub.grad(z, w)
    gnorm = float(np.linalg.norm(g))
    it = cg_total = 0
    descent_ok = True
    paths = []
    while gnorm > inner_tol and it < opts.max_ssn:
        d, ws = _newton(sub, z, w, g, opts)
        cg_total += ws.cg_iters
        paths.append(ws.solver_path)
        Ltd = L.rdot(d)
        slope = float(g @ d)
        alpha = 1.0
        for _ in range(opts.max_backtrack):
            z_t = z + (alpha / sub.n) * Ltd
            w_t = w + alpha * d
            f_t = sub.value(z_t, w_t)
            if f_t <= f + opts.mu * alpha * slope:
                break
            alpha *= opts.beta
        if f_t > f:
            descent_ok = False
        v = v + alpha * d
        Ltv = Ltv + alpha * Ltd
        z, w, f = z_t, w_t, f_t
        g = sub.grad(z, w)
        gnorm = float(np.linalg.norm(g))
        it += 1
    u = prox_h(w, sub.ctx)
    info = {
        "grad_norm": gnorm,
        "cg_iters": cg_total,
        "converged": gnorm <= inner_tol,
        "descent": descent_ok,
        "Ltv": Ltv,
        "paths": paths,
    }
    return v, u, it, info


# ---------------------------------------------------------------------------
# residuals and driver
# ---------------------------------------------------------------------------

def kkt_residuals(L, x):
    """Optimality residuals eta1, eta2 of weights x for the matrix L."""
    x = np.asarray(x, dtype=float)
    V = L.values if isinstance(L, LikelihoodMatrix) else np.asarray(L, dtype=float)
    Lx = V @ x
    bad = np.flatnonzero(~(Lx > 0))
    if bad.size:
        raise DomainError(f"(Lx)_{bad[0]} is not positive", int(bad[0]))
    grad = V.T @ (1.0 / Lx) / V.shape[0]
    eta1 = float(np.max(grad - 1.0))
    eta2 = float(np.linalg.norm(x - np.maximum(x + grad - 1.0, 0.0)))
    return eta1, eta2


def _inner_tol(st, opts):
    base = st.eps / np.sqrt(st.sigma)
    r = opts.inner_rule
    if r == "abs":
        return base
    if r == "n":
        return base / st.n
    if r == "y":
        return base * np.linalg.norm(st.y)
    if r == "sqrtn":
        return base / np.sqrt(st.n)
    raise ValueError(r)


def _precision_floor(st):
    # the gradient carries an absolute error of about sigma * ulp(max |v|)
    return 64.0 * np.finfo(float).eps * st.sigma * max(1.0, float(np.max(np.abs(st.v))))


def init_state(L, opts, x0=None):
    """Starting point for the ALM."""
    n, m = L.shape
    sigma = float(opts.sigma0)
    if x0 is not None:
        x = np.maximum(np.asarray(x0, dtype=float), 1e-16)
        x = x / x.sum()
        Lx = L.dot(x)
        return ALMState(x, Lx / n, 1.0 / Lx, 1.0 / Lx, sigma, opts.eps0)
    if opts.init == "uniform":
        x = np.full(m, 1.0 / m)
        Lx = L.dot(x)
        return ALMState(x, Lx / n, 1.0 / Lx, 1.0 / Lx, sigma, opts.eps0)
    if opts.init == "hard":
        x = np.full(m, sigma / 2.0)
        y = L.dot(np.full(m, 1.0 / m)) / n
        return ALMState(x, y, 1.0 / (n * y), np.zeros(n), sigma, opts.eps0)
    raise ValueError(f"unknown init {opts.init!r}")


def alm_fit(L, opts=None, x0=None, **kw):
    """Maximize (1/n) sum_i log (Lx)_i over the simplex.

    Parameters
    ----------
    L : LikelihoodMatrix
    opts : ALMOptions, optional
        Keyword arguments override individual fields.
    x0 : array, optional
        Warm start; overrides ``opts.init``.

    Returns
    -------
    x : ndarray
        Weights on the simplex.
    report : SolveReport
    """
    t0 = time.perf_counter()
    opts = opts or ALMOptions()
    if kw:
        opts = ALMOptions(**{**opts.__dict__, **kw})
    if not isinstance(L, LikelihoodMatrix):
        L = LikelihoodMatrix.from_matrix(L)
    if opts.use_lowrank and L.lowrank is None:
        L = L.with_lowrank(low_rank_approx(L, opts.lowrank_tol))
    n, m = L.shape
    st = init_state(L, opts, x0)

    trace = {"sigma": [], "chi": [], "eta": [], "ssn": [], "x_min": [], "descent": []}
    best = (np.inf, st.x / st.x.sum())
    cg_total = 0
    converged = False
    eta1 = eta2 = np.nan
    infeas = gap = np.nan
    for k in range(opts.max_outer):
        inner_tol = max(_inner_tol(st, opts), _precision_floor(st))
        v, u, it, info = ssn_solve(st, L, inner_tol, opts)
        cg_total += info["cg_iters"]
        Ltv = info["Ltv"]
        z = Ltv / n - 1.0 + st.x / st.sigma
        x_new = st.sigma * np.maximum(z, 0.0)
        st.y = st.y + st.sigma * (u - v)
        st.x, st.u, st.v = x_new, u, v
        st.outer_iter = k + 1
        st.total_ssn_iters += it

        infeas = float(max(np.max(Ltv / n - 1.0), 0.0))
        gap = float(np.linalg.norm(u - v) / np.linalg.norm(u))
        chi = max(infeas, gap)
        trace["sigma"].append(st.sigma)
        trace["chi"].append(chi)
        trace["ssn"].append(it)
        trace["x_min"].append(float(x_new.min()))
        trace["descent"].append(bool(info["descent"]))

        sx = x_new.sum()
        if sx > 0:
            xn = x_new / sx
            try:
                eta1, eta2 = kkt_residuals(L, xn)
            except DomainError:
                eta1 = eta2 = np.inf
            r = max(eta1, eta2)
            trace["eta"].append(r)
            if r < best[0]:
                best = (r, xn)
            if r <= opts.tol and (not opts.require_dual_feasible or chi <= opts.tol):
                converged = True
                break
        else:
            trace["eta"].append(np.inf)

        if k > 0 and chi > opts.sigma_ratio * st.chi_prev:
            st.sigma = min(st.sigma * opts.sigma_factor, opts.sigma_max)
        st.chi_prev = chi
        if it <= opts.ssn_fast:
            st.eps = st.eps / opts.eps_factor

    if converged:
        x = xn
    else:
        x = best[1]
        warnings.warn("ALM reached its iteration cap before meeting the tolerance", RuntimeWarning)
    eta1, eta2 = kkt_residuals(L, x)
    rep = SolveReport(
        eta1=eta1,
        eta2=eta2,
        loglik=log_likelihood(L, x),
        support_size=int(np.sum(x > opts.support_threshold)),
        outer_iters=st.outer_iter,
        ssn_iters=st.total_ssn_iters,
        cg_iters=cg_total,
        wall_time_ms=(time.perf_counter() - t0) * 1e3,
        converged=converged,
        dual_infeas=infeas,
        dual_gap=gap,
        trace=trace,
    )
    return x, rep
