"""EM and partial EM for joint estimation of atoms and weights.

Both methods maximize l_n(x, mu) = (1/n) sum_i log sum_j x_j phi_{Sigma_i}(Y_i - mu_j).
EM updates mu and x from the responsibilities; partial EM (PEM) updates mu
the same way and then solves for x exactly on the new atoms with the ALM.
"""
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .alm import ALMOptions, alm_fit
from .errors import ConfigError, DegenerateRowError
from .model import LikelihoodMatrix, build_likelihood, logdensity_matrix, make_grid

MASS_TOL = 1e-12


@dataclass
class EMOptions:
    max_iter: int = 100
    obj_tol: float = 1e-4
    alm: ALMOptions = None
    # PEM only: initial weights from an ALM solve on the data-as-atoms grid
    # with the zero-diagonal matrix ("alm0"), or uniform weights ("uniform").
    # None picks "alm0" when d >= 3 and "uniform" otherwise.
    pem_init: str = None


@dataclass
class EMState:
    x: np.ndarray
    mu: np.ndarray
    objective_trace: list = field(default_factory=list)
    iters: int = 0
    converged: bool = False
    info: dict = field(default_factory=dict)

    @property
    def loglik(self):
        return self.objective_trace[-1]


def _log_x(x):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=float))


def _normalize_rows(G):
    """Turn log weights into responsibilities in place; return per-row log normalizers."""
    mx = G.max(axis=1)
    bad = np.flatnonzero(~np.isfinite(mx))
    if bad.size:
        raise DegenerateRowError(f"observation {bad[0]} has zero weight under every atom", int(bad[0]))
    G -= mx[:, None]
    np.exp(G, out=G)
    s = G.sum(axis=1)
    G /= s[:, None]
    return np.log(s) + mx


def responsibilities(x, mu, data, return_loglik=False):
    """Posterior probabilities gamma_ij that observation i came from atom j."""
    G = logdensity_matrix(data, mu)
    G += _log_x(x)[None, :]
    lognorm = _normalize_rows(G)
    if return_loglik:
        return G, float(lognorm.mean())
    return G


def objective(x, mu, data):
    """l_n(x, mu) evaluated in log space."""
    G = logdensity_matrix(data, mu)
    G += _log_x(x)[None, :]
    mx = G.max(axis=1)
    if not np.all(np.isfinite(mx)):
        return -np.inf
    G -= mx[:, None]
    np.exp(G, out=G)
    return float(np.mean(np.log(G.sum(axis=1)) + mx))


def update_atoms(gamma, data, mu_old, mass_tol=MASS_TOL):
    """Closed-form atom update; columns with responsibility mass <= mass_tol keep mu_old."""
    mass = gamma.sum(axis=0)
    live = mass > mass_tol
    mu = np.array(mu_old, dtype=float, copy=True)
    Y = data.points
    c = data.cov
    if c.kind == "iso" or c.is_homoscedastic() and c.kind == "diag":
        num = gamma[:, live].T @ Y
        mu[live] = num / mass[live, None]
    elif c.kind == "diag":
        P = data.precision
        gl = gamma[:, live]
        mu[live] = (gl.T @ (P * Y)) / (gl.T @ P)
    else:
        P = data.precision
        gl = gamma[:, live]
        PY = np.einsum("iab,ib->ia", P, Y)
        A = np.einsum("ij,iab->jab", gl, P)
        b = gl.T @ PY
        mu[live] = np.linalg.solve(A, b[..., None])[..., 0]
    return mu, live


def grad_mu(x, mu, data):
    """Gradient of l_n with respect to each atom (m x d)."""
    gamma = responsibilities(x, mu, data)
    Y = data.points
    c = data.cov
    n = data.n
    if c.kind == "full":
        P = data.precision
        PY = np.einsum("iab,ib->ia", P, Y)
        A = np.einsum("ij,iab->jab", gamma, P)
        return (gamma.T @ PY - np.einsum("jab,jb->ja", A, mu)) / n
    P = data.precision
    return (gamma.T @ (P * Y) - (gamma.T @ P) * mu) / n


def stationarity(x, mu, data, live_tol=1e-8):
    """Residuals of the first-order conditions of max l_n over (simplex, atoms).

    Returns ``(g_mu, g_x)``: the largest atom-gradient entry over atoms with
    weight above ``live_tol`` and the largest violation of the simplex
    optimality condition in x.
    """
    x = np.asarray(x, dtype=float)
    G = grad_mu(x, mu, data)
    live = x > live_tol
    g_mu = float(np.max(np.abs(G[live]))) if live.any() else 0.0
    logK = logdensity_matrix(data, mu)
    mx = logK.max(axis=1)
    K = np.exp(logK - mx[:, None])
    Kx = K @ x
    gx = K.T @ (1.0 / Kx) / data.n
    return g_mu, float(max(np.max(gx) - 1.0, 0.0))


def _initial(data, init):
    if init is None:
        mu0 = np.array(data.points, dtype=float)
        x0 = np.full(mu0.shape[0], 1.0 / mu0.shape[0])
        return x0, mu0
    x0, mu0 = init
    mu0 = np.array(mu0, dtype=float)
    if mu0.ndim == 1:
        mu0 = mu0[:, None]
    if mu0.shape[1] != data.d:
        raise ConfigError("initial atoms have the wrong dimension")
    if x0 is None:
        x0 = np.full(mu0.shape[0], 1.0 / mu0.shape[0])
    x0 = np.asarray(x0, dtype=float)
    if x0.size != mu0.shape[0] or np.any(x0 < 0) or abs(x0.sum() - 1) > 1e-8:
        raise ConfigError("initial weights must lie on the simplex and match the atoms")
    return x0 / x0.sum(), mu0


def em_step(state, data):
    """One EM iteration; appends l_n at the new (x, mu) to the trace."""
    gamma, ll = responsibilities(state.x, state.mu, data, return_loglik=True)
    if not state.objective_trace:
        state.objective_trace.append(ll)
    mu, _ = update_atoms(gamma, data, state.mu)
    x = gamma.mean(axis=0)
    del gamma
    state.x, state.mu = x / x.sum(), mu
    state.objective_trace.append(objective(state.x, state.mu, data))
    state.iters += 1
    return state


def em_fit(data, init=None, opts=None):
    """Classical EM from ``init = (x0, mu0)``; defaults to the data as atoms with uniform weights."""
    opts = opts or EMOptions()
    t0 = time.perf_counter()
    x0, mu0 = _initial(data, init)
    st = EMState(x0, mu0)
    for _ in range(opts.max_iter):
        em_step(st, data)
        tr = st.objective_trace
        if tr[-1] - tr[-2] <= opts.obj_tol:
            st.converged = True
            break
    st.info["wall_time_ms"] = (time.perf_counter() - t0) * 1e3
    return st


def _alm_on(data, mu, opts, x0=None):
    grid = make_grid(data, "explicit", atoms=mu)
    L = build_likelihood(data, grid)
    return alm_fit(L, opts, x0=x0), L


def pem_initial_weights(data, mu0, alm_opts):
    """ALM weights on the data-as-atoms grid with the zero-diagonal matrix."""
    if not np.array_equal(mu0, data.points):
        raise ConfigError("zero-diagonal start requires the atoms to be the data points")
    L = build_likelihood(data, make_grid(data, "data", zero_diagonal=True))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        x, rep = alm_fit(L, alm_opts)
    return x, rep


def pem_fit(data, init=None, opts=None):
    """Partial EM: EM atom updates with exact ALM weight updates.

    Each iteration takes, as the new weights, the best of the ALM solution on
    the updated atoms, the EM column-mean update and the previous weights, so
    the objective trace cannot decrease even when the ALM stops early.
    """
    opts = opts or EMOptions()
    aopts = opts.alm or ALMOptions()
    t0 = time.perf_counter()
    x0, mu0 = _initial(data, init)
    mode = opts.pem_init
    if mode is None:
        mode = "alm0" if (init is None and data.d >= 3) else "uniform"
    info = {"alm_reports": [], "dominance": [], "alm_converged": True, "init": mode}
    if mode == "alm0" and mu0.shape[0] == data.n and np.array_equal(mu0, data.points):
        x0, rep0 = pem_initial_weights(data, mu0, aopts)
        info["init_report"] = rep0
    elif mode not in ("alm0", "uniform"):
        raise ConfigError(f"unknown PEM initialization {mode!r}")
    st = EMState(x0, mu0, info=info)
    for _ in range(opts.max_iter):
        gamma, ll = responsibilities(st.x, st.mu, data, return_loglik=True)
        if not st.objective_trace:
            st.objective_trace.append(ll)
        mu, _ = update_atoms(gamma, data, st.mu)
        x_em = gamma.mean(axis=0)
        x_em /= x_em.sum()
        del gamma
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            (x_alm, rep), _ = _alm_on(data, mu, aopts, x0=st.x)
        info["alm_reports"].append(rep)
        info["alm_converged"] &= rep.converged
        cands = [
            (objective(x_alm, mu, data), 0, x_alm),
            (objective(x_em, mu, data), 1, x_em),
            (objective(st.x, mu, data), 2, st.x),
        ]
        info["dominance"].append(cands[0][0] - cands[1][0])
        best = max(cands, key=lambda t: (t[0], -t[1]))
        st.x, st.mu = best[2], mu
        st.objective_trace.append(best[0])
        st.iters += 1
        tr = st.objective_trace
        if tr[-1] - tr[-2] <= opts.obj_tol:
            st.converged = True
            break
    info["wall_time_ms"] = (time.perf_counter() - t0) * 1e3
    return st
