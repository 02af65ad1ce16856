"""Exact discrete optimal transport through POT's network simplex."""
import os

for _key in (
    "POT_BACKEND_DISABLE_PYTORCH",
    "POT_BACKEND_DISABLE_JAX",
    "POT_BACKEND_DISABLE_CUPY",
    "POT_BACKEND_DISABLE_TENSORFLOW",
):
    os.environ.setdefault(_key, "1")

import numpy as np  # noqa: E402
import ot  # noqa: E402

from .errors import NPMLEError  # noqa: E402

MAX_ITER = 100_000_000


class TransportError(NPMLEError, RuntimeError):
    pass


def sq_euclidean_cost(X, A):
    """||x_i - a_j||^2 via the expanded form, clamped at zero."""
    X = np.asarray(X, dtype=float)
    A = np.asarray(A, dtype=float)
    C = (X * X).sum(axis=1)[:, None] + (A * A).sum(axis=1)[None, :] - 2.0 * X @ A.T
    np.maximum(C, 0.0, out=C)
    return C


def solve_transport(a, b, C):
    """Optimal plan, dual potentials and cost for marginals a, b and cost C.

    The potentials satisfy f_i + g_j <= C_ij with equality where the plan
    is positive.
    """
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    C = np.ascontiguousarray(C, dtype=float)
    # exact balance for the network simplex
    b = b * (a.sum() / b.sum())
    P, log = ot.emd(a, b, C, numItermax=MAX_ITER, log=True)
    if log.get("result_code", 1) != 1:
        raise TransportError(f"network simplex failed: {log.get('warning')}")
    return P, log["u"], log["v"], float(np.sum(P * C))


def certify(P, f, g, C, tol=1e-9):
    """Largest dual violation and largest complementary-slackness gap."""
    R = C - f[:, None] - g[None, :]
    scale = max(1.0, float(np.max(np.abs(C))))
    viol = float(max(0.0, -R.min())) / scale
    slack = float(np.max(np.abs(R[P > 0]), initial=0.0)) / scale
    return viol, slack
