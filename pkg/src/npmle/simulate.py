"""Seeded synthetic data: the one-dimensional two-point example, the
normal / t scale-mixture example and the four multivariate settings.

Randomness comes from a PCG64 stream. Normal variates are produced by the
inverse CDF of 52-bit uniforms, which keeps the draws reproducible bit for bit
for a given seed.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .errors import ConfigError
from .model import Covariance, Dataset, DiscreteDistribution


@dataclass(frozen=True)
class SyntheticInstance:
    data: Dataset
    truth_theta: np.ndarray
    truth_prior: object
    seed: int
    extra: dict = field(default_factory=dict)


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(int(seed)))


def uniforms(rng, size):
    """Uniforms on the open interval (0, 1) with 52 random bits."""
    k = rng.integers(0, 2**52, size=size, dtype=np.int64)
    return (k.astype(float) + 0.5) * 2.0**-52


def normals(rng, size):
    return ndtri(uniforms(rng, size))


def student_t(rng, df, size):
    """t variates as Z / sqrt(chi2_df / df), chi2 built from squared normals."""
    df = int(df)
    z = normals(rng, size)
    chi2 = np.sum(normals(rng, (df,) + tuple(np.atleast_1d(size))) ** 2, axis=0)
    return z / np.sqrt(chi2 / df)


def largest_remainder(props, n):
    """Integer counts summing to n, proportional to props."""
    p = np.asarray(props, dtype=float)
    p = p / p.sum()
    raw = p * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    # stable order: biggest remainder first, ties broken by position
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def gen_example1(n, tau_count, nu, seed):
    """theta_i in {0, nu} with exactly ``tau_count`` entries equal to nu."""
    n, tau_count = int(n), int(tau_count)
    if not 0 <= tau_count <= n:
        raise ConfigError("tau_count must lie in [0, n]")
    rng = make_rng(seed)
    theta = np.zeros(n)
    theta[rng.permutation(n)[:tau_count]] = nu
    Y = theta + normals(rng, n)
    w = np.array([n - tau_count, tau_count], dtype=float) / n
    prior = DiscreteDistribution(np.array([[0.0], [float(nu)]]), w).pruned()
    return SyntheticInstance(Dataset(Y[:, None], Covariance.iso(1.0)), theta[:, None], prior, int(seed))


def variance_grid(y, m):
    """Geometric grid of m variances from (median|y|/10)^2 to 4 max y^2."""
    y = np.asarray(y, dtype=float)
    lo = (np.median(np.abs(y)) / 10.0) ** 2
    hi = 4.0 * np.max(y**2)
    if m == 1:
        return np.array([hi])
    return np.geomspace(lo, hi, int(m))


def gen_example2(n, seed, m=400):
    """Draws from N(0,1), t4 and t6 in proportions 50/20/30.

    Returns an instance whose ``extra`` holds the component labels and a
    variance grid for scale-mixture fitting.
    """
    n = int(n)
    if n < 1:
        raise ConfigError("n must be positive")
    rng = make_rng(seed)
    counts = largest_remainder([0.5, 0.2, 0.3], n)
    labels = np.repeat(np.arange(3), counts)[rng.permutation(n)]
    Y = np.empty(n)
    Y[labels == 0] = normals(rng, counts[0])
    Y[labels == 1] = student_t(rng, 4, counts[1])
    Y[labels == 2] = student_t(rng, 6, counts[2])
    prior = {"components": ["normal", "t4", "t6"], "proportions": [0.5, 0.2, 0.3], "counts": counts.tolist()}
    extra = {"labels": labels, "grid": variance_grid(Y, m)}
    return SyntheticInstance(Dataset(Y[:, None], Covariance.iso(1.0)), np.zeros((n, 1)), prior, int(seed), extra)


def gen_example3(variant, n, d, seed):
    """Multivariate settings with Y_i = theta_i + N(0, I_d).

    a: first two coordinates uniform on the circle of radius 6;
    b: theta_i = 0;
    c: theta_i uniform on {0, 6 e_1, 6 e_2};
    d: theta_i ~ N(0, I_d).
    """
    n, d = int(n), int(d)
    if variant not in ("a", "b", "c", "d"):
        raise ConfigError(f"unknown variant {variant!r}")
    if variant in ("a", "c") and d < 2:
        raise ConfigError(f"variant {variant} needs d >= 2")
    if d < 1 or n < 1:
        raise ConfigError("n and d must be positive")
    rng = make_rng(seed)
    theta = np.zeros((n, d))
    if variant == "a":
        ang = 2.0 * np.pi * uniforms(rng, n)
        theta[:, 0] = 6.0 * np.cos(ang)
        theta[:, 1] = 6.0 * np.sin(ang)
        prior = {"kind": "circle", "radius": 6.0, "plane": [0, 1]}
    elif variant == "b":
        prior = DiscreteDistribution(np.zeros((1, d)), [1.0])
    elif variant == "c":
        atoms = np.zeros((3, d))
        atoms[1, 0] = 6.0
        atoms[2, 1] = 6.0
        k = np.minimum((3.0 * uniforms(rng, n)).astype(int), 2)
        theta = atoms[k]
        prior = DiscreteDistribution(atoms, np.full(3, 1.0 / 3.0))
    else:
        theta = normals(rng, (n, d))
        prior = {"kind": "normal", "mean": 0.0, "cov": "identity"}
    Y = theta + normals(rng, (n, d))
    return SyntheticInstance(Dataset(Y, Covariance.iso(1.0)), theta, prior, int(seed))
