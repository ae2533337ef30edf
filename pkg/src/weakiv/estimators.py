"""k-class (2SLS, LIML) and two-step GMM point estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import _linalg
from .core import IVDataset, prepare
from .covariance import HC0, CovarianceSpec, meat
from .errors import ConvergenceError, SingularityError

EIG_TOL = 1e-12

TWO_SLS = "2sls"
LIML = "liml"
KCLASS = "kclass"
GMM2 = "gmm2"


@dataclass(frozen=True)
class EstimationResult:
    """Point estimate together with the pieces later tests need.

    ``pi_hat`` is the first-stage coefficient matrix that goes with the
    estimator: ``(Z'Z)^-1 Z'X`` for 2SLS and general k-class, and the
    residual-adjusted ``(Z'M_u Z)^-1 Z'M_u X`` for LIML. For two-step GMM it is
    inherited from the first step. ``weight_meat`` is the ``Z'HZ`` matrix used
    to weight the second step of GMM, ``None`` otherwise.
    """

    beta_hat: np.ndarray
    alpha: float
    residuals: np.ndarray
    pi_hat: np.ndarray
    method: str
    weight_meat: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "beta_hat": self.beta_hat.tolist(),
            "alpha": float(self.alpha),
            "pi_hat": self.pi_hat.tolist(),
            "residuals": self.residuals.tolist(),
        }


def _moments(d: IVDataset):
    """Cross products through a QR of Z: P_Z A = Q (Q'A)."""
    Q, R = np.linalg.qr(d.Z)
    QX = Q.T @ d.X
    Qy = Q.T @ d.y
    return R, QX, Qy


def _first_stage(R: np.ndarray, QX: np.ndarray) -> np.ndarray:
    # (Z'Z)^-1 Z'X = R^-1 Q'X
    return linalg.solve_triangular(R, QX)


def _kclass_beta(d: IVDataset, alpha: float, QX, Qy) -> np.ndarray:
    lhs = QX.T @ QX - alpha * (d.X.T @ d.X)
    rhs = QX.T @ Qy - alpha * (d.X.T @ d.y)
    return _linalg.solve(lhs, rhs, "k-class bracket X'P_Z X - alpha X'X")


def estimate_kclass(dataset: IVDataset, alpha: float) -> EstimationResult:
    """``(X'P_Z X - a X'X)^-1 (X'P_Z y - a X'y)`` for a fixed ``a``.

    ``alpha == 0`` is reported as 2SLS.
    """
    d = prepare(dataset)
    alpha = float(alpha)
    R, QX, Qy = _moments(d)
    beta = _kclass_beta(d, alpha, QX, Qy)
    return EstimationResult(
        beta_hat=beta,
        alpha=alpha,
        residuals=d.y - d.X @ beta,
        pi_hat=_first_stage(R, QX),
        method=TWO_SLS if alpha == 0.0 else KCLASS,
    )


def estimate_2sls(dataset: IVDataset) -> EstimationResult:
    return estimate_kclass(dataset, 0.0)


def liml_alpha(d: IVDataset, QW: np.ndarray | None = None) -> float:
    """Smallest generalized eigenvalue of ``(W'P_Z W, W'W)``.

    Reduced to a standard symmetric problem through the Cholesky factor of
    ``W'W``.
    """
    W = d.W
    if QW is None:
        Q, _ = np.linalg.qr(d.Z)
        QW = Q.T @ W
    A = QW.T @ QW
    B = W.T @ W
    try:
        L = np.linalg.cholesky(0.5 * (B + B.T))
    except np.linalg.LinAlgError as exc:
        raise SingularityError("W'W is not positive definite") from exc
    if np.diag(L).min() <= 1e-7 * np.diag(L).max():
        raise SingularityError("W'W is not positive definite")
    Linv_A = linalg.solve_triangular(L, A, lower=True)
    C = linalg.solve_triangular(L, Linv_A.T, lower=True)
    try:
        w = np.linalg.eigvalsh(0.5 * (C + C.T))
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError("symmetric eigen-solver did not converge") from exc
    alpha = float(w[0])
    if not np.isfinite(alpha):
        raise ConvergenceError("non-finite LIML eigenvalue")
    # P_Z is a projection, so the roots lie in [0, 1]
    return min(max(alpha, 0.0), 1.0)


def liml_first_stage(d: IVDataset, u: np.ndarray) -> np.ndarray:
    """``(Z'M_u Z)^-1 Z'M_u X``; an all-zero ``u`` is taken to span nothing."""
    Z, X = d.Z, d.X
    uu = float(u @ u)
    scale = float(d.y @ d.y) + float(np.sum(X * X))
    if uu <= EIG_TOL * scale:
        MZ, MX = Z, X
    else:
        Zu = Z.T @ u
        MZ_Z = Z.T @ Z - np.outer(Zu, Zu) / uu
        MZ_X = Z.T @ X - np.outer(Zu, X.T @ u) / uu
        return _linalg.solve(MZ_Z, MZ_X, "Z'M_u Z")
    return _linalg.solve(MZ.T @ MZ, MZ.T @ MX, "Z'Z")


def estimate_liml(dataset: IVDataset) -> EstimationResult:
    d = prepare(dataset)
    Q, R = np.linalg.qr(d.Z)
    QX = Q.T @ d.X
    Qy = Q.T @ d.y
    alpha = liml_alpha(d, np.column_stack([Qy, QX]))
    beta = _kclass_beta(d, alpha, QX, Qy)
    u = d.y - d.X @ beta
    return EstimationResult(
        beta_hat=beta,
        alpha=alpha,
        residuals=u,
        pi_hat=liml_first_stage(d, u),
        method=LIML,
    )


def estimate_gmm2(
    dataset: IVDataset, first_step: EstimationResult, meat_matrix: np.ndarray
) -> EstimationResult:
    """Two-step GMM with weighting ``meat_matrix^-1``.

    ``meat_matrix`` is the ``Z'H Z`` matrix built from the first-step
    residuals (see :func:`weakiv.covariance.meat`). The first-stage matrix of
    ``first_step`` enters as ``Pi_1' Z'Z``, so any first step may be used.
    """
    d = prepare(dataset)
    Z = d.Z
    S = np.asarray(meat_matrix, dtype=float)
    ZZ = Z.T @ Z
    G = first_step.pi_hat.T @ ZZ  # k_x x k_z
    SiZX = _linalg.chol_solve(S, Z.T @ d.X, "GMM weighting meat")
    SiZy = _linalg.chol_solve(S, Z.T @ d.y, "GMM weighting meat")
    lhs = G @ SiZX
    beta = _linalg.solve(lhs, G @ SiZy, "GMM normal matrix")
    return EstimationResult(
        beta_hat=beta,
        alpha=first_step.alpha,
        residuals=d.y - d.X @ beta,
        pi_hat=first_step.pi_hat,
        method=GMM2,
        weight_meat=S,
    )


def two_step_gmm(dataset: IVDataset, spec: CovarianceSpec = HC0):
    """Standard pipeline: 2SLS first step, then GMM weighted by its meat.

    Returns ``(first_step, second_step)``.
    """
    d = prepare(dataset)
    first = estimate_2sls(d)
    S = meat(d.Z, first.residuals, spec, n_params=d.k_x)
    return first, estimate_gmm2(d, first, S)


def robust_covariance(
    dataset: IVDataset, result: EstimationResult, spec: CovarianceSpec = HC0
) -> np.ndarray:
    """Sandwich variance of ``beta_hat``.

    Every estimator here has the form ``(A'X)^-1 A'y``: ``A = P_Z X - a X``
    for the k-class family and ``A = Z S^-1 Z'Z Pi_1`` for two-step GMM. The
    variance is ``(A'X)^-1 meat(A, u) (X'A)^-1``.
    """
    d = prepare(dataset)
    if result.method == GMM2:
        A = d.Z @ _linalg.chol_solve(result.weight_meat, d.Z.T @ d.Z @ result.pi_hat)
    else:
        Q, _ = np.linalg.qr(d.Z)
        A = Q @ (Q.T @ d.X) - result.alpha * d.X
    bread = _linalg.solve(A.T @ d.X, np.eye(d.k_x), "sandwich bread")
    mid = meat(A, result.residuals, spec, n_params=d.k_x)
    V = bread @ mid @ bread.T
    return 0.5 * (V + V.T)
