"""Empirical Bayes and optimal-transport denoising under a fitted prior."""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateRowError
from .model import Dataset, DiscreteDistribution, logdensity_matrix
from .transport import certify, solve_transport, sq_euclidean_cost

PRUNE = 1e-12


@dataclass(frozen=True)
class TransportPlan:
    """Optimal coupling between the empirical measure and a pruned prior."""

    pi: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    cost: float
    atoms: np.ndarray
    f: np.ndarray = None
    g: np.ndarray = None
    dual_violation: float = 0.0
    slackness_gap: float = 0.0


@dataclass(frozen=True)
class DenoiseResult:
    eb: np.ndarray = None
    ot: np.ndarray = None
    plan: TransportPlan = None
    w2sq: float = None


def _as_points(points):
    if isinstance(points, Dataset):
        return points.points
    X = np.asarray(points, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def _checked_prior(prior, d):
    if prior.d != d:
        raise ConfigError(f"prior atoms have dimension {prior.d}, data has {d}")
    prior.check_simplex()
    return prior


def posterior_mean(data, prior, chunk=2048):
    """Posterior means sum_j a_j w_ij / sum_j w_ij, w_ij = x_j phi_{Sigma_i}(Y_i - a_j)."""
    prior = _checked_prior(prior, data.d)
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights)
    out = np.empty((data.n, data.d))
    for s in range(0, data.n, chunk):
        sl = slice(s, min(data.n, s + chunk))
        G = logdensity_matrix(data, prior.atoms, sl)
        G += logw[None, :]
        mx = G.max(axis=1)
        bad = np.flatnonzero(~np.isfinite(mx))
        if bad.size:
            raise DegenerateRowError("posterior weights vanish", int(s + bad[0]))
        G -= mx[:, None]
        np.exp(G, out=G)
        out[sl] = (G @ prior.atoms) / G.sum(axis=1)[:, None]
    return out


def ot_plan(points, prior, prune=PRUNE, certify_tol=1e-9):
    """Optimal transport plan from the empirical measure of ``points`` to ``prior``.

    Atoms of weight at most ``prune`` are dropped first. The returned plan is
    certified optimal by complementary slackness.
    """
    X = _as_points(points)
    if prior.k == 0:
        raise ConfigError("prior has no atoms")
    prior = _checked_prior(prior, X.shape[1]).pruned(prune)
    n = X.shape[0]
    a = np.full(n, 1.0 / n)
    C = sq_euclidean_cost(X, prior.atoms)
    P, f, g, cost = solve_transport(a, prior.weights, C)
    viol, slack = certify(P, f, g, C)
    if viol > certify_tol or slack > certify_tol:
        raise ConfigError(f"transport solution failed certification ({viol:.2e}, {slack:.2e})")
    return TransportPlan(P, a, prior.weights, cost, prior.atoms, f, g, viol, slack)


def barycentric_project(plan, prior=None):
    """Map each point to n sum_j pi_ij a_j, its conditional mean under the plan."""
    atoms = plan.atoms if prior is None else prior.pruned(PRUNE).atoms
    if atoms.shape[0] != plan.pi.shape[1]:
        raise ConfigError("plan and prior have different numbers of atoms")
    rows = plan.pi.sum(axis=1)
    return (plan.pi @ atoms) / rows[:, None]


def wasserstein2_sq(p, q):
    """Squared 2-Wasserstein distance between two discrete distributions."""
    if p.d != q.d:
        raise ConfigError("distributions live in different dimensions")
    p.check_simplex()
    q.check_simplex()
    p, q = p.pruned(PRUNE), q.pruned(PRUNE)
    C = sq_euclidean_cost(p.atoms, q.atoms)
    return solve_transport(p.weights, q.weights, C)[3]


def mse(estimates, truth):
    """Mean over observations of the squared Euclidean error."""
    E = np.asarray(estimates, dtype=float)
    T = np.asarray(truth, dtype=float)
    if E.shape != T.shape:
        raise ConfigError(f"shape mismatch {E.shape} vs {T.shape}")
    E = E.reshape(E.shape[0], -1)
    return float(np.sum((E - T.reshape(E.shape)) ** 2) / E.shape[0])


def total_squared_error(estimates, truth):
    E = np.asarray(estimates, dtype=float)
    return mse(estimates, truth) * E.shape[0]


def denoise(data, prior, method="eb"):
    """Run the requested denoiser(s): ``"eb"``, ``"ot"`` or ``"both"``."""
    if method not in ("eb", "ot", "both"):
        raise ConfigError(f"unknown denoiser {method!r}")
    eb = posterior_mean(data, prior) if method in ("eb", "both") else None
    ot_est = plan = w2 = None
    if method in ("ot", "both"):
        plan = ot_plan(data, prior)
        ot_est = barycentric_project(plan)
        w2 = plan.cost
    return DenoiseResult(eb, ot_est, plan, w2)
