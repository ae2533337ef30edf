"""Small dense linear-algebra helpers shared by the estimators and tests."""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .errors import RankError, SingularityError

RANK_TOL = 1e-10


def is_full_column_rank(a: np.ndarray, tol: float = RANK_TOL) -> bool:
    """Scale-free rank check: smallest singular value vs. the largest."""
    if a.shape[0] < a.shape[1]:
        return False
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return False
    return bool(s[-1] >= tol * s[0])


def require_full_rank(a: np.ndarray, name: str) -> None:
    if not is_full_column_rank(a):
        raise RankError(f"{name} is rank deficient (tolerance {RANK_TOL:g})")


def check_nonsingular(a: np.ndarray, what: str, tol: float = RANK_TOL) -> None:
    s = np.linalg.svd(np.atleast_2d(a), compute_uv=False)
    if s.size == 0 or not np.all(np.isfinite(s)) or s[0] == 0.0 or s[-1] < tol * s[0]:
        raise SingularityError(f"{what} is numerically singular")


def solve(a: np.ndarray, b: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Solve ``a x = b`` after a conditioning check."""
    check_nonsingular(a, what)
    return np.linalg.solve(a, b)


def chol_solve(a: np.ndarray, b: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Solve with a symmetric positive definite ``a``; no pseudo-inverse fallback."""
    a = 0.5 * (a + a.T)
    try:
        factor = linalg.cho_factor(a, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularityError(f"{what} is not positive definite") from exc
    d = np.diag(factor[0])
    if d.min() <= np.sqrt(RANK_TOL) * d.max():
        # squared Cholesky diagonals bound the eigenvalue ratio from above
        raise SingularityError(f"{what} is not positive definite")
    return linalg.cho_solve(factor, b)


def lstsq_resid(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Residuals of the least-squares projection of the columns of ``b`` on ``a``."""
    coef, *_ = np.linalg.lstsq(a, b, rcond=None)
    return b - a @ coef


def sym_inv_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    if w.min() <= RANK_TOL * max(w.max(), 0.0):
        raise SingularityError("matrix is not positive definite")
    return (v / np.sqrt(w)) @ v.T
