"""Moreau-Yosida calculus for h(u) = -(1/n) sum_i log u_i.

The proximal map of h with parameter sigma solves, componentwise,
    -1/(n z) + sigma (z - w) = 0,
whose positive root is z = (w + sqrt(w^2 + 4/(sigma n))) / 2.
"""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ProxContext:
    sigma: float
    n: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n < 1:
            raise ValueError("n must be at least 1")

    @property
    def c(self):
        return 4.0 / (self.sigma * self.n)


def _root(w, ctx):
    return np.sqrt(w * w + ctx.c)


def prox_h(w, ctx):
    """Proximal point of h at w; strictly positive for every finite w."""
    w = np.asarray(w, dtype=float)
    r = _root(w, ctx)
    # for very negative w the sum w + r cancels; use z = c / (2 (r - w)) there
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(w >= 0, 0.5 * (w + r), 0.5 * ctx.c / (r - w))
    return z


def h(u, n):
    return -np.sum(np.log(u)) / n


def moreau_env_h(w, ctx):
    """Moreau envelope h(z) + (sigma/2)||z - w||^2 at z = prox_h(w)."""
    w = np.asarray(w, dtype=float)
    z = prox_h(w, ctx)
    return float(h(z, ctx.n) + 0.5 * ctx.sigma * np.sum(w_minus_prox(w, ctx) ** 2))


def w_minus_prox(w, ctx):
    """w - prox_h(w) without cancellation (it is -c / (2 (r + w)) for w >= 0)."""
    w = np.asarray(w, dtype=float)
    r = _root(w, ctx)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(w >= 0, -0.5 * ctx.c / (r + w), w - 0.5 * ctx.c / (r - w))


def grad_moreau_h(w, ctx):
    """Gradient sigma (w - prox_h(w)) of the envelope."""
    return ctx.sigma * w_minus_prox(w, ctx)


def dprox_diag(w, ctx):
    """Diagonal of the Jacobian of prox_h; entries lie in (0, 1)."""
    w = np.asarray(w, dtype=float)
    return 0.5 * (1.0 + w / _root(w, ctx))


def one_minus_dprox(w, ctx):
    """1 - dprox_diag(w), evaluated without cancellation for large positive w."""
    w = np.asarray(w, dtype=float)
    r = _root(w, ctx)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(w <= 0, 0.5 * (1.0 - w / r), 0.5 * ctx.c / (r * (r + w)))
    return out


def clarke_max_diag(z):
    """Element of the Clarke Jacobian of max(., 0); ties at zero go to 0."""
    return (np.asarray(z) > 0).astype(float)
