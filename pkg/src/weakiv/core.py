"""Dataset representation for the linear IV model ``y = X b + u``, ``X = Z Pi + V``."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._linalg import is_full_column_rank, lstsq_resid
from .errors import DimensionError, NonFiniteError, RankError


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DimensionError(f"{name} must be one- or two-dimensional")
    return a


@dataclass(frozen=True)
class IVDataset:
    """Observation matrices of an instrumental-variables regression.

    Parameters
    ----------
    y : array of shape (n,)
        Outcome.
    X : array of shape (n, k_x)
        Endogenous regressors. A 1-d array is read as a single column.
    Z : array of shape (n, k_z)
        Excluded instruments.
    X_exog : array of shape (n, k_e), optional
        Exogenous controls. No intercept is added implicitly; pass a column of
        ones if one is wanted and call :func:`partial_out`.

    Construction only coerces shapes. Call :func:`validate` (or any estimator)
    to enforce the rank and finiteness requirements.
    """

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    X_exog: np.ndarray | None = None
    names: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 2 and y.shape[1] == 1:
            y = y[:, 0]
        if y.ndim != 1:
            raise DimensionError("y must be a vector")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", _as_matrix(self.X, "X"))
        object.__setattr__(self, "Z", _as_matrix(self.Z, "Z"))
        if self.X_exog is not None:
            object.__setattr__(self, "X_exog", _as_matrix(self.X_exog, "X_exog"))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k_x(self) -> int:
        return self.X.shape[1]

    @property
    def k_z(self) -> int:
        return self.Z.shape[1]

    @property
    def W(self) -> np.ndarray:
        """Reduced-form view ``[y, X]`` of shape (n, k_x + 1)."""
        return np.column_stack([self.y, self.X])

    def swap(self) -> "IVDataset":
        """Exchange outcome and (scalar) endogenous regressor."""
        if self.k_x != 1:
            raise DimensionError("normalization swap needs exactly one endogenous regressor")
        return replace(self, y=self.X[:, 0].copy(), X=self.y[:, None].copy())


def validate(dataset: IVDataset) -> None:
    """Raise unless ``n > k_z > k_x >= 1``, Z and X have full column rank and
    every entry is finite."""
    n = dataset.n
    for name, a in (("X", dataset.X), ("Z", dataset.Z)):
        if a.shape[0] != n:
            raise DimensionError(f"{name} has {a.shape[0]} rows, y has {n}")
    if dataset.X_exog is not None and dataset.X_exog.shape[0] != n:
        raise DimensionError("X_exog row count differs from y")
    k_x, k_z = dataset.k_x, dataset.k_z
    if k_x < 1:
        raise DimensionError("at least one endogenous regressor is required")
    if not k_z > k_x:
        raise DimensionError(
            f"model must be overidentified: k_z={k_z} must exceed k_x={k_x}"
        )
    if not n > k_z:
        raise DimensionError(f"need n > k_z (n={n}, k_z={k_z})")
    arrays = [dataset.y, dataset.X, dataset.Z]
    if dataset.X_exog is not None:
        arrays.append(dataset.X_exog)
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise NonFiniteError("data contain NaN or infinite values")
    if not is_full_column_rank(dataset.Z):
        raise RankError("Z does not have full column rank")
    if not is_full_column_rank(dataset.X):
        raise RankError("X does not have full column rank")


def partial_out(dataset: IVDataset) -> IVDataset:
    """Residualize y, X and Z on the exogenous controls and drop them.

    A dataset without controls is returned unchanged.
    """
    C = dataset.X_exog
    if C is None:
        return dataset
    n, k_e = C.shape
    if not np.all(np.isfinite(C)):
        raise NonFiniteError("X_exog contains NaN or infinite values")
    if not is_full_column_rank(C):
        raise RankError("X_exog does not have full column rank")
    if not n > dataset.k_z + k_e:
        raise DimensionError("need n > k_z + k_e to partial out the controls")
    stacked = np.column_stack([dataset.y, dataset.X, dataset.Z])
    resid = lstsq_resid(C, stacked)
    k_x = dataset.k_x
    out = IVDataset(
        y=resid[:, 0],
        X=resid[:, 1 : 1 + k_x],
        Z=resid[:, 1 + k_x :],
        names=dataset.names,
    )
    if not is_full_column_rank(out.Z):
        raise RankError("instruments lose rank after partialling out the controls")
    validate(out)
    return out


def orthonormalize(dataset: IVDataset) -> IVDataset:
    """Rotate the instruments so that ``Z'Z / n = I``.

    Uses ``Z_new = Z T`` with ``T`` the inverse of the upper Cholesky factor
    (positive diagonal) of ``Z'Z / n``; the column space is unchanged.
    """
    Z = dataset.Z
    if not is_full_column_rank(Z):
        raise RankError("Z does not have full column rank")
    n = Z.shape[0]
    R = np.linalg.cholesky(Z.T @ Z / n).T
    Z_new = np.linalg.solve(R.T, Z.T).T
    return replace(dataset, Z=Z_new)


def prepare(dataset: IVDataset) -> IVDataset:
    """Partial out any controls and validate; the entry point used by estimators."""
    if dataset.X_exog is not None:
        return partial_out(dataset)
    validate(dataset)
    return dataset
