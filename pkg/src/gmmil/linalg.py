"""Linear-algebra and log-density primitives shared by the estimators.

Densities are always evaluated in log space through a Cholesky factor; the
explicit inverse of a covariance matrix is never formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy import sparse

from .errors import DimensionMismatch, NotFactorizable, NotSymmetric

LOG_2PI = float(np.log(2.0 * np.pi))

#: Ridge values tried in order when a covariance matrix is not numerically PD.
DEFAULT_RIDGE_SCHEDULE = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor of ``matrix + ridge_added * I``."""

    dim: int
    lower_factor: np.ndarray
    log_det: float
    ridge_added: float = 0.0

    def solve(self, rhs):
        """Return ``A^{-1} rhs`` using two triangular solves."""
        return sla.cho_solve((self.lower_factor, True), rhs, check_finite=False)

    def whiten(self, rhs):
        """Return ``L^{-1} rhs``; columns of ``rhs`` are vectors."""
        return sla.solve_triangular(self.lower_factor, rhs, lower=True, check_finite=False)

    def inverse(self):
        """Explicit inverse, for callers that need the precision matrix itself."""
        inv = self.solve(np.eye(self.dim))
        return 0.5 * (inv + inv.T)

    def reconstruct(self):
        return self.lower_factor @ self.lower_factor.T


def _check_symmetric(matrix, tol):
    scale = max(1.0, float(np.max(np.abs(matrix)))) if matrix.size else 1.0
    if np.max(np.abs(matrix - matrix.T), initial=0.0) > tol * scale:
        raise NotSymmetric("matrix is not symmetric")


def spd_factorize(matrix, ridge_schedule=DEFAULT_RIDGE_SCHEDULE, *, sym_tol=1e-8) -> SpdFactor:
    """Cholesky-factorize a symmetric matrix, adding ridge if needed.

    The first ridge value in ``ridge_schedule`` for which the factorization
    succeeds (with a strictly positive, finite diagonal) is used and recorded
    in ``ridge_added``.

    Raises
    ------
    NotSymmetric
        If ``matrix`` is not symmetric to ``sym_tol`` (relative to its scale).
    NotFactorizable
        If every entry of the schedule fails.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    _check_symmetric(a, sym_tol)
    a = 0.5 * (a + a.T)
    dim = a.shape[0]
    eye = np.eye(dim)
    for ridge in ridge_schedule:
        try:
            low = np.linalg.cholesky(a + ridge * eye if ridge else a)
        except np.linalg.LinAlgError:
            continue
        diag = np.diag(low)
        if not np.all(np.isfinite(low)) or np.any(diag <= 0.0):
            continue
        return SpdFactor(dim, low, float(2.0 * np.sum(np.log(diag))), float(ridge))
    raise NotFactorizable(f"matrix of dimension {dim} not factorizable with ridge up to {max(ridge_schedule)}")


def log_gaussian_density(x, mu, factor: SpdFactor) -> float:
    """Log density of N(mu, Sigma) at ``x`` given the factor of Sigma."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if x.shape != (factor.dim,) or mu.shape != (factor.dim,):
        raise DimensionMismatch(f"x {x.shape}, mu {mu.shape}, factor dim {factor.dim}")
    z = factor.whiten(x - mu)
    return float(-0.5 * factor.dim * LOG_2PI - 0.5 * factor.log_det - 0.5 * z @ z)


def log_gaussian_rows(x, mu, factor: SpdFactor) -> np.ndarray:
    """Vectorized :func:`log_gaussian_density` over the rows of ``x`` (n, p)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != factor.dim or np.shape(mu) != (factor.dim,):
        raise DimensionMismatch(f"x {x.shape}, mu {np.shape(mu)}, factor dim {factor.dim}")
    z = factor.whiten((x - mu).T)
    return -0.5 * factor.dim * LOG_2PI - 0.5 * factor.log_det - 0.5 * np.einsum("ij,ij->j", z, z)


def vech_index(p):
    """Row/column indices of the lower triangle, stacked column by column."""
    cols, rows = np.triu_indices(p)
    return rows, cols


def vech(matrix) -> np.ndarray:
    """Half-vectorization: lower triangle stacked column by column."""
    b = np.asarray(matrix)
    rows, cols = vech_index(b.shape[0])
    return b[rows, cols]


def unvech(v, p) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (p * (p + 1) // 2,):
        raise DimensionMismatch(f"vech of a {p}x{p} matrix has {p * (p + 1) // 2} entries, got {v.shape}")
    out = np.zeros((p, p))
    rows, cols = vech_index(p)
    out[rows, cols] = v
    out[cols, rows] = v
    return out


def vec(matrix) -> np.ndarray:
    """Column-major vectorization."""
    return np.asarray(matrix).reshape(-1, order="F")


def duplication_matrix(p: int) -> sparse.csr_matrix:
    """Duplication matrix ``D`` with ``vec(B) = D @ vech(B)`` for symmetric ``B``.

    Built from the explicit construction: the column for the pair ``i >= j``
    (1-based) sits at ``(j-1)p + i - j(j-1)/2`` and carries ones at the
    column-major positions of ``(i, j)`` and ``(j, i)``.
    """
    if p < 1:
        raise ValueError("p must be positive")
    rows, cols, vals = [], [], []
    for j in range(1, p + 1):
        for i in range(j, p + 1):
            col = (j - 1) * p + i - j * (j - 1) // 2 - 1
            for r, c in {(i, j), (j, i)}:
                rows.append((c - 1) * p + (r - 1))
                cols.append(col)
                vals.append(1.0)
    q = p * (p + 1) // 2
    return sparse.csr_matrix((vals, (rows, cols)), shape=(p * p, q))


def log1m_prod_complement(log_complements) -> float:
    """Return ``log(1 - exp(sum(log_complements)))``.

    With ``log_complements[m] = log(1 - pi_m)`` this is the log of
    ``1 - prod(1 - pi_m)``. Two branches keep full precision whether the
    product is near 0 or near 1.
    """
    total = float(np.sum(log_complements))
    if total > 0.0:
        raise ValueError("log complements must be <= 0")
    if total == 0.0:
        return -np.inf
    if total > -np.log(2.0):
        return float(np.log(-np.expm1(total)))
    return float(np.log1p(-np.exp(total)))
