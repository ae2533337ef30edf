"""Meat matrices for robust inference.

``meat(Z, u, spec)`` returns the k x k middle term of a sandwich estimator,
built from the columns of ``Z`` and residuals ``u``. The forms are raw sums
(no 1/n); HC1 is the only variant with a small-sample factor.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

_KINDS = ("homoskedastic", "hc0", "hc1", "newey-west")


@dataclass(frozen=True)
class CovarianceSpec:
    kind: str = "hc0"
    lags: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown covariance kind {self.kind!r}")
        if self.lags < 0 or int(self.lags) != self.lags:
            raise ConfigError("Newey-West lag count must be a non-negative integer")

    @classmethod
    def parse(cls, text: str) -> "CovarianceSpec":
        """Read the CLI spelling: ``hc0``, ``hc1``, ``homo`` or ``nw:L``."""
        t = text.strip().lower()
        if t in ("hc0", "hc1"):
            return cls(t)
        if t in ("homo", "homoskedastic"):
            return cls("homoskedastic")
        m = re.fullmatch(r"nw:(\d+)", t)
        if m:
            return cls("newey-west", int(m.group(1)))
        raise ConfigError(f"cannot parse covariance spec {text!r}")

    def __str__(self) -> str:
        if self.kind == "newey-west":
            return f"nw:{self.lags}"
        return {"homoskedastic": "homo"}.get(self.kind, self.kind)


HOMOSKEDASTIC = CovarianceSpec("homoskedastic")
HC0 = CovarianceSpec("hc0")
HC1 = CovarianceSpec("hc1")


def newey_west(lags: int) -> CovarianceSpec:
    return CovarianceSpec("newey-west", lags)


def bartlett_weights(lags: int) -> np.ndarray:
    """Weights ``1 - l / (L + 1)`` for ``l = 1..L``."""
    return 1.0 - np.arange(1, lags + 1) / (lags + 1.0)


def meat(Z, residuals, spec: CovarianceSpec = HC0, n_params: int = 1) -> np.ndarray:
    """Robust middle matrix ``Z' H Z``.

    Parameters
    ----------
    Z : array (n, k)
    residuals : array (n,)
    spec : CovarianceSpec
    n_params : int
        Number of estimated slope parameters, used only by HC1's
        ``n / (n - n_params)`` factor.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    u = np.asarray(residuals, dtype=float).reshape(-1)
    n, k = Z.shape
    if u.shape[0] != n:
        raise DimensionError("residual length does not match Z")
    if not n > k:
        raise DimensionError("need more observations than columns")

    if spec.kind == "homoskedastic":
        out = (u @ u / n) * (Z.T @ Z)
    else:
        Zu = Z * u[:, None]
        out = Zu.T @ Zu
        if spec.kind == "hc1":
            out *= n / (n - n_params)
        elif spec.kind == "newey-west":
            for lag, w in enumerate(bartlett_weights(spec.lags), start=1):
                if lag >= n:
                    break
                gamma = Zu[lag:].T @ Zu[:-lag]
                out += w * (gamma + gamma.T)
    return 0.5 * (out + out.T)
