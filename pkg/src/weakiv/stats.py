"""Overidentification and instrument-strength statistics.

The robust score statistic for an estimate with residuals ``u`` and fitted
first stage ``X_hat = Z Pi_hat`` is

    S = u' Zt (Zt' H_u Zt)^-1 Zt' u,    Zt = M_{X_hat} Z_2,

where ``Z_2`` holds ``k_z - k_x`` of the instrument columns. Evaluated at 2SLS
it coincides with Hansen's J; evaluated at LIML it is the Kleibergen-Paap rank
statistic. Neither value depends on which columns go into ``Z_2`` as long as
the remaining block of ``Pi_hat`` is invertible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from . import _linalg
from .core import IVDataset, orthonormalize, prepare
from .covariance import HC0, CovarianceSpec, meat
from .errors import DomainError, PartitionError, SingularityError, UnsupportedError
from .estimators import LIML, TWO_SLS, EstimationResult, estimate_liml

HANSEN_J = "HansenJ"
SCORE_2SLS = "RobustScore2SLS"
SCORE_LIML = "RobustScoreLIML"
SCORE = "RobustScore"
KP = "KP"
SARGAN = "Sargan"
EFFECTIVE_F = "EffectiveF"

# worst-case bias threshold for the effective-F critical value
FEFF_TAU = 0.10
FEFF_LEVEL = 0.05


@dataclass(frozen=True)
class TestResult:
    """A test statistic with its reference distribution.

    ``p_value`` is ``None`` for the effective F, which instead carries its
    critical value in ``critical_value``.
    """

    __test__ = False  # keep pytest from collecting this class

    statistic: float
    df: int
    p_value: float | None
    test: str
    partition_cols: tuple = field(default_factory=tuple)
    critical_value: float | None = None

    def to_dict(self) -> dict:
        out = {
            "test": self.test,
            "statistic": float(self.statistic),
            "df": int(self.df),
            "p_value": None if self.p_value is None else float(self.p_value),
            "partition_cols": [int(c) for c in self.partition_cols],
        }
        if self.critical_value is not None:
            out["critical_value"] = float(self.critical_value)
        return out


@dataclass(frozen=True)
class ConcentrationResult:
    mu2: np.ndarray
    v_zv: np.ndarray

    @property
    def scalar(self) -> float:
        """``mu2`` for a single endogenous regressor."""
        if self.mu2.shape != (1, 1):
            raise UnsupportedError("concentration matrix is not scalar")
        return float(self.mu2[0, 0])


def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution via the incomplete gamma."""
    x = float(x)
    if not np.isfinite(x):
        raise DomainError("chi-square argument must be finite")
    if x < 0:
        raise DomainError("chi-square argument must be non-negative")
    if df < 1:
        raise DomainError("degrees of freedom must be positive")
    return float(special.gammaincc(0.5 * df, 0.5 * x))


def _clamp(stat: float) -> float:
    # quadratic forms in a PD matrix; only rounding can make them negative
    return max(float(stat), 0.0)


def _overid(stat: float, df: int, test: str, partition=()) -> TestResult:
    stat = _clamp(stat)
    return TestResult(stat, df, chi2_sf(stat, df), test, tuple(partition))


def j_test(
    dataset: IVDataset,
    first_step: EstimationResult,
    second_step: EstimationResult,
    spec: CovarianceSpec = HC0,
) -> TestResult:
    """Hansen's J: ``u2' Z meat(Z, u1)^-1 Z' u2``."""
    d = prepare(dataset)
    S = meat(d.Z, first_step.residuals, spec, n_params=d.k_x)
    g = d.Z.T @ second_step.residuals
    stat = g @ _linalg.chol_solve(S, g, "J-test meat")
    return _overid(stat, d.k_z - d.k_x, HANSEN_J)


def _check_partition(pi_hat: np.ndarray, cols, k_z: int, k_x: int) -> np.ndarray:
    cols = np.asarray(cols, dtype=int).reshape(-1)
    if cols.size != k_z - k_x or len(set(cols.tolist())) != cols.size:
        raise PartitionError(f"partition must name {k_z - k_x} distinct columns")
    if cols.min(initial=0) < 0 or cols.max(initial=0) >= k_z:
        raise PartitionError("partition column out of range")
    keep = np.setdiff1d(np.arange(k_z), cols)
    if not _linalg.is_full_column_rank(pi_hat[keep]):
        raise PartitionError("first-stage block for the retained instruments is singular")
    return cols


def default_partition(pi_hat: np.ndarray) -> list[int]:
    """Last ``k_z - k_x`` columns, rotated until the retained block of
    ``pi_hat`` is invertible."""
    k_z, k_x = pi_hat.shape
    m = k_z - k_x
    for shift in range(k_z):
        cols = [(k_z - m + j - shift) % k_z for j in range(m)]
        try:
            _check_partition(pi_hat, cols, k_z, k_x)
        except PartitionError:
            continue
        return sorted(cols)
    raise PartitionError("no rotation of the default partition leaves an invertible block")


def robust_score(
    dataset: IVDataset,
    estimate: EstimationResult,
    spec: CovarianceSpec = HC0,
    partition=None,
) -> TestResult:
    """One-step robust score statistic for the overidentifying restrictions.

    Parameters
    ----------
    partition : sequence of int, optional
        Columns of ``Z`` forming ``Z_2``. Defaults to :func:`default_partition`.
    """
    d = prepare(dataset)
    pi_hat = estimate.pi_hat
    if partition is None:
        partition = default_partition(pi_hat)
    cols = _check_partition(pi_hat, partition, d.k_z, d.k_x)
    u = estimate.residuals
    Xh = d.Z @ pi_hat
    Z2 = d.Z[:, cols]
    coef = _linalg.solve(Xh.T @ Xh, Xh.T @ Z2, "fitted first stage X_hat'X_hat")
    Zt = Z2 - Xh @ coef
    g = Zt.T @ u
    H = meat(Zt, u, spec, n_params=d.k_x)
    stat = g @ _linalg.chol_solve(H, g, "score-test meat")
    test = {TWO_SLS: SCORE_2SLS, LIML: SCORE_LIML}.get(estimate.method, SCORE)
    return _overid(stat, d.k_z - d.k_x, test, cols.tolist())


def kp_test(dataset: IVDataset, spec: CovarianceSpec = HC0, partition=None) -> TestResult:
    """Kleibergen-Paap rank statistic, computed as the LIML robust score."""
    d = prepare(dataset)
    res = robust_score(d, estimate_liml(d), spec, partition)
    return TestResult(res.statistic, res.df, res.p_value, KP, res.partition_cols)


def sargan_test(dataset: IVDataset, estimate: EstimationResult) -> TestResult:
    """``u'P_Z u / (u'u / n)``."""
    d = prepare(dataset)
    u = estimate.residuals
    Q, _ = np.linalg.qr(d.Z)
    Qu = Q.T @ u
    uu = float(u @ u)
    if uu == 0.0:
        stat = 0.0
    else:
        stat = float(Qu @ Qu) / (uu / d.n)
    return _overid(stat, d.k_z - d.k_x, SARGAN)


def effective_f_critical_value(
    W2: np.ndarray, tau: float = FEFF_TAU, level: float = FEFF_LEVEL
) -> float:
    """Simplified conservative critical value for the effective F.

    ``W2`` is the robust covariance of the first-stage coefficients in
    orthonormalized instruments. The effective degrees of freedom
    ``K_eff = tr(W2)^2 (1 + 2x) / (tr(W2'W2) + 2x tr(W2) lambda_max(W2))``
    with ``x = 1 / tau`` feed a scaled non-central chi-square quantile.
    """
    W2 = 0.5 * (W2 + W2.T)
    x = 1.0 / tau
    tr = float(np.trace(W2))
    lmax = float(np.linalg.eigvalsh(W2)[-1])
    k_eff = tr**2 * (1 + 2 * x) / (float(np.sum(W2 * W2)) + 2 * x * tr * lmax)
    return float(stats.ncx2.ppf(1 - level, k_eff, x * k_eff) / k_eff)


def effective_f(dataset: IVDataset, spec: CovarianceSpec = HC0) -> TestResult:
    """Robust first-stage strength statistic for a single endogenous regressor.

    With instruments rotated so that ``Z'Z/n = I``,
    ``F_eff = x'P_Z x / tr(meat(Z, v) / n)`` where ``v`` are first-stage
    residuals. The companion critical value is stored in ``critical_value``.
    """
    d = prepare(dataset)
    if d.k_x != 1:
        raise UnsupportedError("effective F is defined for one endogenous regressor")
    d = orthonormalize(d)
    x = d.X[:, 0]
    Zx = d.Z.T @ x
    v = x - d.Z @ (Zx / d.n)
    W2 = meat(d.Z, v, spec, n_params=1) / d.n
    tr = float(np.trace(W2))
    if not tr > 0:
        raise SingularityError("first-stage residual covariance has zero trace")
    stat = float(Zx @ Zx) / d.n / tr
    kappa = effective_f_critical_value(W2)
    return TestResult(_clamp(stat), d.k_z, None, EFFECTIVE_F, (), kappa)


def concentration(Pi, ZtZ, omega_zv, qzz_inv) -> ConcentrationResult:
    """Heteroskedasticity-robust concentration matrix.

    ``v_zv = R'(omega_zv kron qzz_inv) R`` with ``R = I_kx kron vec(I_kz)``,
    and ``mu2 = k_z v_zv^-1/2 Pi'Z'Z Pi v_zv^-1/2``.
    """
    Pi = np.atleast_2d(np.asarray(Pi, dtype=float))
    if Pi.shape[0] == 1 and Pi.shape[1] > 1:
        Pi = Pi.T
    k_z, k_x = Pi.shape
    ZtZ = np.asarray(ZtZ, dtype=float)
    omega_zv = np.atleast_2d(np.asarray(omega_zv, dtype=float))
    qzz_inv = np.asarray(qzz_inv, dtype=float)
    if omega_zv.shape != (k_x * k_z, k_x * k_z) or ZtZ.shape != (k_z, k_z):
        raise ValueError("non-conformable concentration inputs")
    R = np.kron(np.eye(k_x), np.eye(k_z).reshape(-1, 1))
    v_zv = R.T @ np.kron(omega_zv, qzz_inv) @ R
    v_zv = 0.5 * (v_zv + v_zv.T)
    root = _linalg.sym_inv_sqrt(v_zv)
    mu2 = k_z * root @ (Pi.T @ ZtZ @ Pi) @ root
    return ConcentrationResult(0.5 * (mu2 + mu2.T), v_zv)
