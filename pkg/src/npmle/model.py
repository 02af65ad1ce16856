"""Problem data: observations, covariances, support grids and the likelihood matrix.

All densities are evaluated in log space. Each row of the likelihood matrix is
divided by its largest entry, so the stored values lie in [0, 1] with a 1 in
every row, and the removed log factor is kept in ``log_norms``.
"""
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.linalg import qr
from scipy.spatial.distance import cdist

from .errors import ConfigError, DegenerateRowError, DomainError, InvalidCovarianceError

LOG_2PI = np.log(2.0 * np.pi)
DEFAULT_MAX_BYTES = 16 * 2**30
_CHUNK_ENTRIES = 2**22


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _cholesky(S):
    """Lower Cholesky factor of one SPD matrix or a stack of them."""
    S = np.asarray(S, dtype=float)
    if not np.all(np.isfinite(S)):
        raise InvalidCovarianceError("covariance has non-finite entries")
    if not np.allclose(S, np.swapaxes(S, -1, -2), rtol=1e-10, atol=0.0):
        raise InvalidCovarianceError("covariance is not symmetric")
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise InvalidCovarianceError("covariance is not positive definite") from exc


# ---------------------------------------------------------------------------
# covariances and datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Covariance:
    """Known noise covariances.

    ``kind`` is ``"iso"`` (one variance shared by every observation and
    coordinate), ``"diag"`` (an n x d array of variances) or ``"full"``
    (an n x d x d stack of SPD matrices).
    """

    kind: str
    value: np.ndarray

    def __post_init__(self):
        if self.kind not in ("iso", "diag", "full"):
            raise ConfigError(f"unknown covariance kind {self.kind!r}")
        v = np.asarray(self.value, dtype=float)
        if self.kind == "iso":
            if v.size != 1:
                raise ConfigError("isotropic covariance takes a single variance")
            v = v.reshape(())
            if not (np.isfinite(v) and v > 0):
                raise InvalidCovarianceError("isotropic variance must be positive and finite")
        elif self.kind == "diag":
            if v.ndim != 2:
                raise ConfigError("diagonal covariance must be an n x d array")
            if not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise InvalidCovarianceError("diagonal variances must be positive and finite")
        else:
            if v.ndim != 3 or v.shape[1] != v.shape[2]:
                raise ConfigError("full covariance must be an n x d x d array")
            _cholesky(v)
        object.__setattr__(self, "value", _frozen(v))

    @classmethod
    def iso(cls, v=1.0):
        return cls("iso", v)

    @classmethod
    def diag(cls, variances):
        return cls("diag", variances)

    @classmethod
    def full(cls, matrices):
        return cls("full", matrices)

    def is_homoscedastic(self):
        if self.kind == "iso":
            return True
        v = self.value
        return bool(np.all(v == v[:1]))


@dataclass(frozen=True)
class Dataset:
    """Observations ``points`` (n x d) with their known covariances."""

    points: np.ndarray
    cov: Covariance = field(default_factory=Covariance.iso)

    def __post_init__(self):
        Y = np.asarray(self.points, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.ndim != 2 or Y.shape[0] < 1 or Y.shape[1] < 1:
            raise ConfigError("points must be a non-empty n x d array")
        if not np.all(np.isfinite(Y)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(Y), axis=1))[0])
            raise ConfigError(f"observation {bad} is not finite")
        cov = self.cov
        if not isinstance(cov, Covariance):
            cov = Covariance.iso(cov)
        n, d = Y.shape
        if cov.kind == "diag" and cov.value.shape != (n, d):
            raise ConfigError(f"diagonal covariance has shape {cov.value.shape}, expected {(n, d)}")
        if cov.kind == "full" and cov.value.shape != (n, d, d):
            raise ConfigError(f"full covariance has shape {cov.value.shape}, expected {(n, d, d)}")
        object.__setattr__(self, "points", _frozen(Y))
        object.__setattr__(self, "cov", cov)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    @cached_property
    def chol(self):
        """Per-observation lower Cholesky factors (full mode only)."""
        if self.cov.kind != "full":
            raise ConfigError("Cholesky factors are only stored for full covariances")
        return _frozen(_cholesky(self.cov.value))

    @cached_property
    def whiten(self):
        """Inverse Cholesky factors W_i with W_i Sigma_i W_i^T = I (full mode)."""
        C = self.chol
        eye = np.broadcast_to(np.eye(self.d), C.shape)
        return _frozen(np.linalg.solve(C, eye))

    @cached_property
    def logdet(self):
        """log det(Sigma_i) for every observation."""
        c = self.cov
        if c.kind == "iso":
            out = np.full(self.n, self.d * np.log(float(c.value)))
        elif c.kind == "diag":
            out = np.log(c.value).sum(axis=1)
        else:
            out = 2.0 * np.log(np.diagonal(self.chol, axis1=1, axis2=2)).sum(axis=1)
        return _frozen(out)

    @cached_property
    def precision(self):
        """Precision matrices as an (n, d) diagonal or (n, d, d) stack."""
        c = self.cov
        if c.kind == "iso":
            return _frozen(np.full((self.n, self.d), 1.0 / float(c.value)))
        if c.kind == "diag":
            return _frozen(1.0 / c.value)
        W = self.whiten
        return _frozen(np.einsum("kai,kaj->kij", W, W))

    def subset(self, idx):
        idx = np.asarray(idx)
        c = self.cov
        cov = c if c.kind == "iso" else Covariance(c.kind, c.value[idx])
        return Dataset(self.points[idx], cov)


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

def gaussian_logdensity(y, mu, cov):
    """Log density of N(mu, cov) at y.

    ``cov`` may be a scalar variance, a vector of per-coordinate variances,
    or a full d x d matrix.
    """
    r = np.atleast_1d(np.asarray(y, dtype=float) - np.asarray(mu, dtype=float))
    d = r.size
    S = np.asarray(cov, dtype=float)
    if S.ndim == 0 or S.size == 1 and d == 1:
        S = np.eye(d) * float(S.reshape(-1)[0])
    elif S.ndim == 1:
        if S.size != d:
            raise ConfigError("variance vector length does not match dimension")
        S = np.diag(S)
    if S.shape != (d, d):
        raise ConfigError(f"covariance shape {S.shape} does not match dimension {d}")
    C = _cholesky(S)
    z = np.linalg.solve(C, r)
    logdet = 2.0 * np.log(np.diag(C)).sum()
    return float(-0.5 * (d * LOG_2PI + logdet) - 0.5 * z @ z)


def _chunk_rows(n, m, per_entry=1):
    step = max(1, _CHUNK_ENTRIES // max(1, m * per_entry))
    for s in range(0, n, step):
        yield slice(s, min(n, s + step))


def logdensity_matrix(data, atoms, rows=None, out=None):
    """Matrix of log phi_{Sigma_i}(Y_i - mu_j) for the selected rows."""
    atoms = np.asarray(atoms, dtype=float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    if atoms.shape[1] != data.d:
        raise ConfigError(f"atoms have dimension {atoms.shape[1]}, data has {data.d}")
    rows = slice(None) if rows is None else rows
    Y = data.points[rows]
    k, m, d = Y.shape[0], atoms.shape[0], data.d
    if out is None:
        out = np.empty((k, m))
    c = data.cov
    const = -0.5 * (d * LOG_2PI + data.logdet[rows])
    if c.kind == "iso":
        out[:] = cdist(Y, atoms, "sqeuclidean")
        out *= -0.5 / float(c.value)
    elif c.kind == "diag":
        P = data.precision[rows]
        out[:] = 0.0
        tmp = np.empty((k, m))
        for t in range(d):
            np.subtract(Y[:, t, None], atoms[None, :, t], out=tmp)
            np.square(tmp, out=tmp)
            tmp *= P[:, t, None]
            out += tmp
        out *= -0.5
    else:
        W = data.whiten[rows]
        for sl in _chunk_rows(k, m, d):
            Wy = np.einsum("kab,kb->ka", W[sl], Y[sl])
            Wmu = np.einsum("kab,jb->kja", W[sl], atoms)
            Wmu -= Wy[:, None, :]
            out[sl] = -0.5 * np.einsum("kja,kja->kj", Wmu, Wmu)
    out += const[:, None]
    return out


def scale_logdensity_matrix(y, variances):
    """Log densities of centered N(0, s_j) at scalar observations y_i."""
    y = np.asarray(y, dtype=float).reshape(-1)
    s = np.asarray(variances, dtype=float).reshape(-1)
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise InvalidCovarianceError("scale-mixture grid variances must be positive")
    return -0.5 * (LOG_2PI + np.log(s))[None, :] - 0.5 * (y[:, None] ** 2) / s[None, :]


# ---------------------------------------------------------------------------
# grids and distributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SupportGrid:
    """Candidate support points ``atoms`` (m x d)."""

    atoms: np.ndarray
    origin: str = "explicit"
    zero_diagonal: bool = False

    def __post_init__(self):
        A = np.asarray(self.atoms, dtype=float)
        if A.ndim == 1:
            A = A[:, None]
        if A.ndim != 2 or A.shape[0] < 1:
            raise ConfigError("a grid needs at least one atom")
        if not np.all(np.isfinite(A)):
            raise ConfigError("grid atoms must be finite")
        if self.origin not in ("explicit", "lattice", "data"):
            raise ConfigError(f"unknown grid origin {self.origin!r}")
        if self.zero_diagonal and self.origin != "data":
            raise ConfigError("zero diagonal is only valid when the atoms are the data points")
        object.__setattr__(self, "atoms", _frozen(A))

    @property
    def m(self):
        return self.atoms.shape[0]


def lattice_atoms(lo, hi, counts):
    """Tensor lattice with endpoints; degenerate axes collapse to one value."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    counts = [int(c) for c in np.atleast_1d(counts)]
    if len(counts) != lo.size:
        raise ConfigError(f"lattice needs {lo.size} counts, got {len(counts)}")
    if any(c < 1 for c in counts):
        raise ConfigError("lattice counts must be positive")
    axes = []
    for a, b, c in zip(lo, hi, counts):
        axes.append(np.array([a]) if a == b else np.linspace(a, b, c))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in mesh], axis=1)


def make_grid(data, kind="data", counts=None, zero_diagonal=False, atoms=None):
    """Build a support grid.

    Parameters
    ----------
    data : Dataset
    kind : {"lattice", "data", "explicit"}
        ``lattice`` spans the bounding box of the data with ``counts`` points
        per axis, ``data`` uses the observations themselves as atoms, and
        ``explicit`` takes ``atoms`` as given.
    """
    if kind == "lattice":
        if counts is None:
            raise ConfigError("lattice grid needs per-axis counts")
        counts = np.atleast_1d(counts)
        if counts.size == 1 and data.d > 1:
            counts = np.repeat(counts, data.d)
        Y = data.points
        return SupportGrid(lattice_atoms(Y.min(axis=0), Y.max(axis=0), counts), "lattice")
    if kind == "data":
        return SupportGrid(data.points, "data", bool(zero_diagonal))
    if kind == "explicit":
        if atoms is None:
            raise ConfigError("explicit grid needs atoms")
        if zero_diagonal:
            raise ConfigError("zero diagonal is only valid when the atoms are the data points")
        return SupportGrid(atoms, "explicit")
    raise ConfigError(f"unknown grid kind {kind!r}")


@dataclass(frozen=True)
class DiscreteDistribution:
    """Finitely supported distribution sum_j weights[j] * delta(atoms[j])."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.atoms, dtype=float)
        if A.ndim == 1:
            A = A[:, None]
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if A.shape[0] != w.size:
            raise ConfigError("atoms and weights differ in length")
        if w.size == 0:
            raise ConfigError("distribution has no atoms")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ConfigError("weights must be nonnegative and finite")
        object.__setattr__(self, "atoms", _frozen(A))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def k(self):
        return self.weights.size

    @property
    def d(self):
        return self.atoms.shape[1]

    def normalized(self):
        s = self.weights.sum()
        if s <= 0:
            raise ConfigError("weights sum to zero")
        return DiscreteDistribution(self.atoms, self.weights / s)

    def pruned(self, threshold=0.0):
        """Drop atoms with weight <= threshold and renormalize."""
        keep = self.weights > threshold
        if not keep.any():
            raise ConfigError("no atom has weight above the threshold")
        return DiscreteDistribution(self.atoms[keep], self.weights[keep]).normalized()

    def check_simplex(self, tol=1e-8):
        if abs(self.weights.sum() - 1.0) > tol:
            raise ConfigError(f"weights sum to {self.weights.sum():.17g}, not 1")


# ---------------------------------------------------------------------------
# likelihood matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LowRank:
    """Truncated pivoted QR: L[:, perm] ~= Q @ R, or the same for L^T."""

    Q: np.ndarray
    R: np.ndarray
    perm: np.ndarray
    transposed: bool = False

    @property
    def k(self):
        return self.R.shape[0]

    @cached_property
    def invperm(self):
        ip = np.empty_like(self.perm)
        ip[self.perm] = np.arange(self.perm.size)
        return ip

    def dense(self):
        B = np.empty((self.Q.shape[0], self.R.shape[1]))
        B[:, self.perm] = self.Q @ self.R
        return B.T if self.transposed else B

    def dot(self, w):
        if self.transposed:
            out = np.empty(self.perm.size)
            out[self.perm] = self.R.T @ (self.Q.T @ w)
            return out
        return self.Q @ (self.R @ w[self.perm])

    def rdot(self, v):
        if self.transposed:
            return self.Q @ (self.R @ v[self.perm])
        out = np.empty(self.perm.size)
        out[self.perm] = self.R.T @ (self.Q.T @ v)
        return out

    def columns(self, J):
        if self.transposed:
            return (self.Q[J] @ self.R)[:, self.invperm].T
        return self.Q @ self.R[:, self.invperm[J]]


@dataclass(frozen=True)
class LikelihoodMatrix:
    """Row-scaled likelihood values with the bookkeeping to undo the scaling.

    ``values[i, j] * exp(log_norms[i])`` is the raw density. When
    ``zero_diagonal`` is set the diagonal is stored as 0 and the raw
    diagonal log-densities are kept in ``diag_log``.
    """

    values: np.ndarray
    log_norms: np.ndarray
    zero_diagonal: bool = False
    diag_log: np.ndarray = None
    lowrank: LowRank = None

    def __post_init__(self):
        V = self.values
        if not isinstance(V, np.ndarray) or V.flags.writeable or V.dtype != float:
            V = _frozen(V)
        if V.ndim != 2:
            raise ConfigError("likelihood values must be a matrix")
        object.__setattr__(self, "values", V)
        object.__setattr__(self, "log_norms", _frozen(self.log_norms))
        if self.log_norms.shape != (V.shape[0],):
            raise ConfigError("log_norms length must equal the number of rows")
        if self.zero_diagonal:
            if V.shape[0] != V.shape[1]:
                raise ConfigError("zero diagonal requires a square matrix")
            if self.diag_log is None:
                raise ConfigError("zero diagonal requires the raw diagonal")
            object.__setattr__(self, "diag_log", _frozen(self.diag_log))

    @property
    def shape(self):
        return self.values.shape

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def m(self):
        return self.values.shape[1]

    @property
    def row_scales(self):
        return np.exp(-self.log_norms)

    def with_lowrank(self, factors):
        return replace(self, lowrank=factors)

    def without_lowrank(self):
        return replace(self, lowrank=None)

    def dot(self, x):
        """L @ x using the low-rank factors when present."""
        if self.lowrank is not None:
            return self.lowrank.dot(x)
        return self.values @ x

    def rdot(self, v):
        """L^T @ v using the low-rank factors when present."""
        if self.lowrank is not None:
            return self.lowrank.rdot(v)
        return self.values.T @ v

    def columns(self, J):
        if self.lowrank is not None:
            return self.lowrank.columns(J)
        return self.values[:, J]

    def raw_log(self):
        """Unscaled log densities with the diagonal restored."""
        with np.errstate(divide="ignore"):
            out = np.log(self.values) + self.log_norms[:, None]
        if self.zero_diagonal:
            np.fill_diagonal(out, self.diag_log)
        return out

    @classmethod
    def from_matrix(cls, A):
        """Wrap an arbitrary nonnegative matrix (explicit kernel entry point)."""
        A = np.array(A, dtype=float)
        if A.ndim != 2 or A.size == 0:
            raise ConfigError("likelihood matrix must be a non-empty 2-d array")
        if not np.all(np.isfinite(A)) or np.any(A < 0):
            raise ConfigError("likelihood matrix entries must be finite and nonnegative")
        mx = A.max(axis=1)
        bad = np.flatnonzero(mx <= 0)
        if bad.size:
            raise DegenerateRowError(f"row {bad[0]} of the likelihood matrix is zero", int(bad[0]))
        A /= mx[:, None]
        return cls(A, np.log(mx))

    @classmethod
    def from_log(cls, logK, zero_diagonal=False):
        """Row-normalize a matrix of log densities (modified in place)."""
        logK = np.asarray(logK, dtype=float)
        n, m = logK.shape
        diag_log = None
        if zero_diagonal:
            if n != m:
                raise ConfigError("zero diagonal requires m = n")
            diag_log = np.diagonal(logK).copy()
            np.fill_diagonal(logK, -np.inf)
        mx = logK.max(axis=1)
        bad = np.flatnonzero(~np.isfinite(mx))
        if bad.size:
            raise DegenerateRowError(f"row {bad[0]} has no finite log-density", int(bad[0]))
        logK -= mx[:, None]
        np.exp(logK, out=logK)
        return cls(logK, mx, bool(zero_diagonal), diag_log)


def build_likelihood(data, grid, family="location", max_bytes=DEFAULT_MAX_BYTES):
    """Assemble the row-scaled likelihood matrix for ``data`` on ``grid``.

    ``family="scale"`` treats the (1-d) atoms as variances of centered
    Gaussians, ignoring the data covariance.
    """
    n, m = data.n, grid.m
    if n * m * 8 > max_bytes:
        raise ConfigError(
            f"likelihood matrix would need {n * m * 8 / 2**30:.2f} GiB, above the "
            f"{max_bytes / 2**30:.2f} GiB cap"
        )
    zd = bool(grid.zero_diagonal)
    if zd:
        if m != n:
            raise ConfigError("zero diagonal requires m = n")
        if not np.array_equal(grid.atoms, data.points):
            raise ConfigError("zero diagonal requires the atoms to be the data points in order")
    if family == "location":
        logK = np.empty((n, m))
        for sl in _chunk_rows(n, m):
            logdensity_matrix(data, grid.atoms, sl, out=logK[sl])
    elif family == "scale":
        if data.d != 1 or grid.atoms.shape[1] != 1:
            raise ConfigError("scale family needs one-dimensional data and variance atoms")
        logK = scale_logdensity_matrix(data.points[:, 0], grid.atoms[:, 0])
    else:
        raise ConfigError(f"unknown family {family!r}")
    return LikelihoodMatrix.from_log(logK, zd)


def _check_weights(x, m, tol=1e-8):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != m:
        raise ConfigError(f"weight vector has length {x.size}, expected {m}")
    if np.any(x < -tol) or abs(x.sum() - 1.0) > tol:
        raise ConfigError("weights are not on the probability simplex")
    return x


def log_likelihood(L, x):
    """Average log marginal likelihood (1/n) sum_i log (L x)_i on raw densities."""
    x = _check_weights(x, L.m)
    Lx = L.values @ x
    with np.errstate(divide="ignore"):
        logLx = np.log(Lx)
        if L.zero_diagonal:
            logLx = np.logaddexp(logLx, L.diag_log - L.log_norms + np.log(np.maximum(x, 0)))
    bad = np.flatnonzero(~np.isfinite(logLx))
    if bad.size:
        raise DomainError(f"(Lx)_{bad[0]} is not positive", int(bad[0]))
    return float(np.mean(logLx + L.log_norms))


def low_rank_approx(L, tol=1e-10):
    """Truncated column-pivoted QR of the likelihood values.

    Truncates at the first pivot whose magnitude drops below ``tol`` times the
    first one, then grows the rank until the Frobenius residual is at most
    ``tol * ||L||_F``.
    """
    if tol <= 0:
        raise ConfigError("low-rank tolerance must be positive")
    A = L.values
    transposed = A.shape[1] > A.shape[0]
    B = A.T if transposed else A
    Q, R, perm = qr(B, mode="economic", pivoting=True)
    r = R.shape[0]
    diag = np.abs(np.diag(R))
    if diag[0] == 0:
        k = 1
    else:
        small = np.flatnonzero(diag < tol * diag[0])
        k = int(small[0]) if small.size else r
        k = max(k, 1)
    # tail[k] = ||R[k:, :]||_F, the exact residual of the rank-k truncation
    rows2 = np.einsum("ij,ij->i", R, R)
    tail = np.sqrt(np.concatenate([np.cumsum(rows2[::-1])[::-1], [0.0]]))
    target = tol * np.linalg.norm(A)
    while k < r and tail[k] > target:
        k += 1
    return LowRank(
        _frozen(Q[:, :k]), _frozen(R[:k]), _frozen(perm, dtype=np.intp), transposed
    )
