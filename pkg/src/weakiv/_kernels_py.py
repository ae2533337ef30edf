"""Vectorized NumPy version of the replication kernel.

Used when the compiled extension is unavailable, and as the reference the
compiled kernel is benchmarked and tested against. Both compute, for a batch
of single-regressor datasets, the 2SLS and LIML slopes, the LIML root, Hansen's
J (2SLS first step, HC0 meat) and the KP statistic (LIML robust score, HC0).
"""

from __future__ import annotations

import numpy as np

# output columns
B2SLS, BLIML, ALPHA, JSTAT, KPSTAT, STATUS = range(6)
N_OUT = 6

OK = 0.0
DEGENERATE = 1.0

_TOL = 1e-10


def _score(Z, ZZ, x, y, b, Pi, ok):
    """HC0 robust score statistic at slope ``b`` and first stage ``Pi``.

    The retained instrument is the one with the largest first-stage loading,
    which keeps ``Pi_1`` invertible; the statistic does not depend on the
    choice otherwise.
    """
    R, n, kz = Z.shape
    u = y - x * b[:, None]
    keep = np.argmax(np.abs(Pi), axis=1)
    Zu = np.einsum("rni,rn->ri", Z, u)
    # M = sum u^2 z z'
    M = np.einsum("rn,rni,rnj->rij", u * u, Z, Z)
    PQP = np.einsum("ri,rij,rj->r", Pi, ZZ, Pi)
    bad = ~(PQP > 0)
    PQP = np.where(bad, 1.0, PQP)
    # S' = E2' - c Pi' with c = Z2'X_hat / X_hat'X_hat
    ZZPi = np.einsum("rij,rj->ri", ZZ, Pi)
    idx = np.arange(kz)
    cols = np.array([np.delete(idx, k) for k in range(kz)])[keep]  # (R, kz-1)
    c = np.take_along_axis(ZZPi, cols, axis=1) / PQP[:, None]
    St = -c[:, :, None] * Pi[:, None, :]
    St[np.arange(R)[:, None], np.arange(kz - 1)[None, :], cols] += 1.0
    g = np.einsum("rij,rj->ri", St, Zu)
    H = np.einsum("rij,rjk,rlk->ril", St, M, St)
    w = np.linalg.eigvalsh(H)
    bad |= ~(w[:, 0] > _TOL * np.maximum(w[:, -1], 0.0))
    H[bad] = np.eye(kz - 1)
    stat = np.einsum("ri,ri->r", g, np.linalg.solve(H, g[..., None])[..., 0])
    ok &= ~bad
    return np.maximum(stat, 0.0)


def replicate_stats(Z: np.ndarray, x: np.ndarray, y: np.ndarray, demean: bool = True) -> np.ndarray:
    """Statistics for a batch of datasets.

    Parameters
    ----------
    Z : array (R, n, k_z)
    x, y : arrays (R, n)
    demean : bool
        Partial out an intercept first.

    Returns
    -------
    array (R, 6)
        Columns ``b2sls, bliml, alpha, J, KP, status``; ``status`` is 1 for
        replications where a required inverse failed (other columns NaN).
    """
    Z = np.asarray(Z, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if demean:
        Z = Z - Z.mean(axis=1, keepdims=True)
        x = x - x.mean(axis=1, keepdims=True)
        y = y - y.mean(axis=1, keepdims=True)
    R, n, kz = Z.shape
    ok = np.ones(R, dtype=bool)

    ZZ = np.einsum("rni,rnj->rij", Z, Z)
    w = np.linalg.eigvalsh(ZZ)
    bad = ~(w[:, 0] > _TOL * w[:, -1])
    ok &= ~bad
    ZZ[bad] = np.eye(kz)
    Zx = np.einsum("rni,rn->ri", Z, x)
    Zy = np.einsum("rni,rn->ri", Z, y)
    Pi2 = np.linalg.solve(ZZ, Zx[..., None])[..., 0]
    Pi_y = np.linalg.solve(ZZ, Zy[..., None])[..., 0]
    xPx = np.einsum("ri,ri->r", Zx, Pi2)
    xPy = np.einsum("ri,ri->r", Zx, Pi_y)
    yPy = np.einsum("ri,ri->r", Zy, Pi_y)
    xx = np.einsum("rn,rn->r", x, x)
    xy = np.einsum("rn,rn->r", x, y)
    yy = np.einsum("rn,rn->r", y, y)

    with np.errstate(divide="ignore", invalid="ignore"):
        b2 = xPy / xPx
        # smallest root of det([[yPy, xPy], [xPy, xPx]] - a [[yy, xy], [xy, xx]]) = 0
        qa = yy * xx - xy**2
        qb = yPy * xx + xPx * yy - 2 * xPy * xy
        qc = yPy * xPx - xPy**2
        disc = np.sqrt(np.maximum(qb * qb - 4 * qa * qc, 0.0))
        alpha = 2 * qc / (qb + disc)
        alpha = np.clip(np.where(qc > 0, alpha, 0.0), 0.0, 1.0)
        bl = (xPy - alpha * xy) / (xPx - alpha * xx)
    ok &= (qa > _TOL * yy * xx) & np.isfinite(b2) & np.isfinite(bl) & (xPx > 0)
    b2 = np.where(ok, b2, 0.0)
    bl = np.where(ok, bl, 0.0)

    J = _score(Z, ZZ, x, y, b2, Pi2, ok)

    ul = y - x * bl[:, None]
    uu = np.einsum("rn,rn->r", ul, ul)
    ux = np.einsum("rn,rn->r", ul, x)
    Zul = np.einsum("rni,rn->ri", Z, ul)
    small = uu <= 1e-12 * (yy + xx)
    uu_safe = np.where(small, 1.0, uu)
    coef = np.where(small, 0.0, 1.0 / uu_safe)
    A = ZZ - coef[:, None, None] * Zul[:, :, None] * Zul[:, None, :]
    rhs = Zx - Zul * (coef * ux)[:, None]
    wA = np.linalg.eigvalsh(A)
    badA = ~(wA[:, 0] > _TOL * wA[:, -1])
    ok &= ~badA
    A[badA] = np.eye(kz)
    PiL = np.linalg.solve(A, rhs[..., None])[..., 0]
    KP = _score(Z, ZZ, x, y, bl, PiL, ok)

    out = np.empty((R, N_OUT))
    out[:, B2SLS] = b2
    out[:, BLIML] = bl
    out[:, ALPHA] = alpha
    out[:, JSTAT] = J
    out[:, KPSTAT] = KP
    out[:, STATUS] = np.where(ok, OK, DEGENERATE)
    out[~ok, :STATUS] = np.nan
    return out
