"""Sampler for the weak-instrument limits of the estimators and tests.

Under ``Pi = C / sqrt(n)`` the normalized moments ``Z'u / sqrt(n)`` and
``Z'V / sqrt(n)`` converge jointly to a normal vector ``(Psi_Zu, vec Psi_ZV)``
with covariance ``Omega_Z``, and every estimator and statistic is a smooth
function of that vector. With ``A = Q C + Psi_ZV`` the limits are

* 2SLS error: ``(A'Q^-1 A)^-1 A'Q^-1 Psi_Zu``;
* ``n`` times the LIML root: the smallest generalized eigenvalue of
  ``(M'Q^-1 M, Sigma_Vbar)`` with ``M = [A beta + Psi_Zu, A]``;
* LIML error: ``(A'Q^-1 A - a Sigma_V)^-1 (A'Q^-1 Psi_Zu - a Sigma_Vu)``;
* score statistics ``g' Om^-1 g`` with ``g = S'(Psi_Zu - A b)``,
  ``S' = E_2' - Q_2' P (P'Q P)^-1 P'`` for the matching first-stage limit ``P``,
  and ``Om = S' (sum_ab w_a w_b Omega_ab) S`` for ``w = (1, -b)``.

Estimator limits are of ``beta_hat - beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigError, SingularityError
from .simulation import Design, SimulationConfig, abs_normal_moment, config_pi

MAX_DEGENERATE = 0.01
BLOCK = 4096


@dataclass(frozen=True)
class LimitModel:
    """Population moments that pin down the limit experiment.

    ``omega_z`` is ordered ``(Z u, vec(Z V))`` with ``vec`` stacking columns.
    Its ``(k_x+1)^2`` blocks of size ``k_z`` are the weighted fourth moments
    ``E[e_a e_b z z']`` for ``e = (u, v_1, ..., v_kx)``.
    """

    C: np.ndarray
    beta: np.ndarray
    qzz: np.ndarray
    omega_z: np.ndarray
    sigma_v: np.ndarray
    sigma_vu: np.ndarray
    sigma_u2: float
    sigma_vbar: np.ndarray = None
    partition: tuple = None
    _chol: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if C.shape[0] == 1 and C.shape[1] > 1:
            C = C.T
        k_z, k_x = C.shape
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(k_x))
        object.__setattr__(self, "qzz", np.asarray(self.qzz, dtype=float).reshape(k_z, k_z))
        om = np.asarray(self.omega_z, dtype=float)
        dim = (k_x + 1) * k_z
        if om.shape != (dim, dim):
            raise ConfigError(f"omega_z must be {dim} x {dim}")
        if not np.allclose(om, om.T, atol=1e-12 * max(1.0, np.abs(om).max())):
            raise ConfigError("omega_z must be symmetric")
        om = 0.5 * (om + om.T)
        object.__setattr__(self, "omega_z", om)
        object.__setattr__(self, "sigma_v", np.asarray(self.sigma_v, dtype=float).reshape(k_x, k_x))
        object.__setattr__(self, "sigma_vu", np.asarray(self.sigma_vu, dtype=float).reshape(k_x))
        if self.sigma_vbar is None:
            T = np.eye(k_x + 1)
            T[0, 1:] = self.beta
            S = np.empty((k_x + 1, k_x + 1))
            S[0, 0] = self.sigma_u2
            S[0, 1:] = S[1:, 0] = self.sigma_vu
            S[1:, 1:] = self.sigma_v
            object.__setattr__(self, "sigma_vbar", T @ S @ T.T)
        if self.partition is None:
            object.__setattr__(self, "partition", tuple(range(k_x, k_z)))
        if np.linalg.matrix_rank(C) < k_x and np.any(C):
            raise ConfigError("C must have full column rank")
        w, V = np.linalg.eigh(om)
        if w.min() < -1e-8 * max(w.max(), 1e-300):
            raise ConfigError("omega_z is not positive semidefinite")
        # PSD repair before factoring
        w = np.where(w < 1e-12 * w.sum(), 0.0, w)
        object.__setattr__(self, "_chol", V * np.sqrt(w))

    @property
    def k_z(self) -> int:
        return self.C.shape[0]

    @property
    def k_x(self) -> int:
        return self.C.shape[1]

    def block(self, a: int, b: int) -> np.ndarray:
        """``E[e_a e_b z z']`` with ``e = (u, v_1, ...)``."""
        k = self.k_z
        return self.omega_z[a * k : (a + 1) * k, b * k : (b + 1) * k]

    @property
    def fourth_moments(self) -> dict:
        return {(a, b): self.block(a, b) for a in range(self.k_x + 1) for b in range(a, self.k_x + 1)}

    @property
    def q2(self) -> np.ndarray:
        return self.qzz[:, list(self.partition)]

    @property
    def q22(self) -> np.ndarray:
        p = list(self.partition)
        return self.qzz[np.ix_(p, p)]


@dataclass(frozen=True)
class LimitDraw:
    psi_zu: np.ndarray
    psi_zv: np.ndarray
    alpha_l: float
    beta_2sls: np.ndarray
    beta_liml: np.ndarray
    pi_2sls: np.ndarray
    pi_liml: np.ndarray
    j_limit: float
    kp_limit: float


def _inv_spd_batch(M: np.ndarray, tol: float = 1e-10):
    """Batched inverse of symmetric matrices; flags those that are not PD."""
    w = np.linalg.eigvalsh(M)
    bad = ~(w[:, 0] > tol * np.maximum(np.abs(w[:, -1]), 1e-300))
    M = M.copy()
    M[bad] = np.eye(M.shape[-1])
    return np.linalg.inv(M), bad


def _score_batch(model: LimitModel, qinv, e, P, b):
    """Limit score statistic for error vectors ``e``, first-stage ``P``, slopes ``b``."""
    D = e.shape[0]
    k_z, k_x = model.k_z, model.k_x
    Q = model.qzz
    PQP = np.einsum("dik,ij,djl->dkl", P, Q, P)
    PQPi, bad = _inv_spd_batch(PQP)
    part = list(model.partition)
    E2t = np.eye(k_z)[part]  # (m, k_z)
    St = E2t[None] - np.einsum("im,dik,dkl,djl->dmj", Q[:, part], P, PQPi, P)
    g = np.einsum("dmj,dj->dm", St, e)
    w = np.concatenate([np.ones((D, 1)), -b], axis=1)
    K = k_x + 1
    Om = np.zeros((D, k_z, k_z))
    for a in range(K):
        for c in range(K):
            Om += (w[:, a] * w[:, c])[:, None, None] * model.block(a, c)[None]
    Om = np.einsum("dmi,dij,dnj->dmn", St, Om, St)
    Omi, bad2 = _inv_spd_batch(Om)
    stat = np.einsum("dm,dmn,dn->d", g, Omi, g)
    return np.maximum(stat, 0.0), bad | bad2


def _draw_batch(model: LimitModel, rng: np.random.Generator, D: int) -> dict:
    k_z, k_x = model.k_z, model.k_x
    Q = model.qzz
    qinv = np.linalg.inv(Q)
    psi = rng.standard_normal((D, (k_x + 1) * k_z)) @ model._chol.T
    pu = psi[:, :k_z]
    pv = psi[:, k_z:].reshape(D, k_x, k_z).transpose(0, 2, 1)  # columns stacked
    A = (Q @ model.C)[None] + pv
    AQA = np.einsum("dik,ij,djl->dkl", A, qinv, A)
    AQu = np.einsum("dik,ij,dj->dk", A, qinv, pu)
    AQAi, bad = _inv_spd_batch(AQA)
    b2 = np.einsum("dkl,dl->dk", AQAi, AQu)

    # LIML root through the Cholesky factor of Sigma_Vbar
    M = np.concatenate([np.einsum("dik,k->di", A, model.beta)[..., None] + pu[..., None], A], axis=2)
    G = np.einsum("dik,ij,djl->dkl", M, qinv, M)
    L = np.linalg.cholesky(model.sigma_vbar)
    Li = np.linalg.inv(L)
    alpha = np.linalg.eigvalsh(Li @ G @ Li.T)[:, 0]
    alpha = np.maximum(alpha, 0.0)

    lhs = AQA - alpha[:, None, None] * model.sigma_v[None]
    rhs = AQu - alpha[:, None] * model.sigma_vu[None]
    s = np.linalg.svd(lhs, compute_uv=False)
    bad |= ~(s[:, -1] > 1e-10 * s[:, 0])
    lhs[bad] = np.eye(k_x)
    bl = np.linalg.solve(lhs, rhs[..., None])[..., 0]

    P2 = np.einsum("ij,djk->dik", qinv, A)
    eL = pu - np.einsum("dik,dk->di", A, bl)
    den = (
        model.sigma_u2
        - 2 * bl @ model.sigma_vu
        + np.einsum("dk,kl,dl->d", bl, model.sigma_v, bl)
    )
    scale = model.sigma_u2 + np.trace(model.sigma_v)
    bad |= ~(den > 1e-12 * scale)
    den = np.where(bad, 1.0, den)
    cov = model.sigma_vu[None] - bl @ model.sigma_v.T
    PL = P2 - np.einsum("ij,dj,dk->dik", qinv, eL, cov) / den[:, None, None]

    e2 = pu - np.einsum("dik,dk->di", A, b2)
    J, bJ = _score_batch(model, qinv, e2, P2, b2)
    KP, bK = _score_batch(model, qinv, eL, PL, bl)
    bad |= bJ | bK
    bad |= ~np.isfinite(J) | ~np.isfinite(KP) | ~np.isfinite(bl).all(axis=1)
    return {
        "psi_zu": pu,
        "psi_zv": pv,
        "alpha_l": alpha,
        "beta_2sls": b2,
        "beta_liml": bl,
        "pi_2sls": P2,
        "pi_liml": PL,
        "j_limit": J,
        "kp_limit": KP,
        "bad": bad,
    }


def _block_rng(seed: int, block: int) -> np.random.Generator:
    key = np.random.SeedSequence(seed).generate_state(2, np.uint64)
    counter = np.array([0, 0, block, 1], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def sample_limit_batch(model: LimitModel, n_draws: int, seed: int = 0) -> dict:
    """``n_draws`` limit realizations as arrays keyed like :class:`LimitDraw`.

    Draws come in blocks with their own counter-based streams. Degenerate draws
    (a required inverse fails) are replaced by fresh draws from the same
    stream; the number replaced is returned under ``"degenerate"`` and more
    than 1% raises :class:`SingularityError`.
    """
    if n_draws < 1:
        raise ConfigError("n_draws must be positive")
    parts = []
    degenerate = 0
    for blk, start in enumerate(range(0, n_draws, BLOCK)):
        need = min(BLOCK, n_draws - start)
        rng = _block_rng(seed, blk)
        got = []
        while need > 0:
            d = _draw_batch(model, rng, need)
            keep = ~d.pop("bad")
            degenerate += int((~keep).sum())
            if degenerate > MAX_DEGENERATE * n_draws + 1:
                raise SingularityError(
                    f"more than {MAX_DEGENERATE:.0%} of limit draws were degenerate"
                )
            got.append({k: v[keep] for k, v in d.items()})
            need -= int(keep.sum())
        parts.extend(got)
    out = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    out["degenerate"] = degenerate
    return out


def sample_limit_draw(model: LimitModel, rng: np.random.Generator) -> LimitDraw:
    """A single limit realization, resampling degenerate draws."""
    for _ in range(100):
        d = _draw_batch(model, rng, 1)
        if not d.pop("bad")[0]:
            return LimitDraw(
                psi_zu=d["psi_zu"][0],
                psi_zv=d["psi_zv"][0],
                alpha_l=float(d["alpha_l"][0]),
                beta_2sls=d["beta_2sls"][0],
                beta_liml=d["beta_liml"][0],
                pi_2sls=d["pi_2sls"][0],
                pi_liml=d["pi_liml"][0],
                j_limit=float(d["j_limit"][0]),
                kp_limit=float(d["kp_limit"][0]),
            )
    raise SingularityError("limit model produces only degenerate draws")


def limit_rejection_rate(model: LimitModel, n_draws: int, level: float, seed: int = 0):
    """Fractions of J and KP limit draws above the chi-square critical value."""
    if n_draws < 1000:
        raise ConfigError("need at least 1,000 draws")
    if not 0 < level <= 1:
        raise ConfigError("level must lie in (0, 1]")
    d = sample_limit_batch(model, n_draws, seed)
    crit = stats.chi2.isf(level, model.k_z - model.k_x)
    return float(np.mean(d["j_limit"] > crit)), float(np.mean(d["kp_limit"] > crit))


def design_moments(design: Design, k_z: int, rho: float):
    """Analytic ``(omega_z, sigma_v, sigma_vu, sigma_u2)`` for a null design."""
    a = design.alpha
    corr = np.array([[1.0, rho], [rho, 1.0]])
    if design.kind == "design2":
        # E[exp(a 1'z) z z'] = exp(k a^2 / 2) (I + a^2 11')
        s2 = math.exp(k_z * a**2 / 2)
        F = s2 * (np.eye(k_z) + a**2 * np.ones((k_z, k_z)))
    else:
        s2 = abs_normal_moment(2 * a)
        F = np.diag([abs_normal_moment(2 * a + 2)] + [s2] * (k_z - 1))
    return np.kron(corr, F), np.array([[s2]]), np.array([rho * s2]), s2


def numeric_moments(design: Design, k_z: int, rho: float, n_draws: int = 10_000_000, seed: int = 0,
                    chunk: int = 1_000_000):
    """Monte Carlo expectation of ``omega_z`` with entrywise standard errors.

    Used to check :func:`design_moments`; the error correlation enters only as
    the ``corr`` factor, so only the instrument weights are simulated.
    """
    rng = np.random.default_rng(seed)
    k = k_z
    s1 = np.zeros((k, k))
    s2 = np.zeros((k, k))
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        z = rng.standard_normal((m, k))
        if design.kind == "design2":
            g2 = np.exp(design.alpha * z.sum(axis=1))
        else:
            g2 = np.abs(z[:, 0]) ** (2 * design.alpha)
        prod = g2[:, None, None] * z[:, :, None] * z[:, None, :]
        s1 += prod.sum(axis=0)
        s2 += (prod**2).sum(axis=0)
        done += m
    mean = s1 / n_draws
    se = np.sqrt(np.maximum(s2 / n_draws - mean**2, 0.0) / n_draws)
    corr = np.array([[1.0, rho], [rho, 1.0]])
    return np.kron(corr, mean), np.kron(np.abs(corr), se)


def model_from_design(config: SimulationConfig, numeric: bool = False, n_draws: int = 10_000_000) -> LimitModel:
    """Limit model matching a simulation design (``beta = 0``, ``Q = I``).

    ``C = sqrt(n) pi`` uses the same calibration as the simulation. The power
    design is only supported at ``omega = 0``; the alternative is not a local
    drift.
    """
    d = config.design
    if d.kind == "power" and d.omega != 0:
        raise ConfigError("limit model for the power design requires omega = 0")
    k = config.k_z
    om, sv, svu, su2 = design_moments(d, k, config.rho)
    if numeric:
        om, _ = numeric_moments(d, k, config.rho, n_draws=n_draws, seed=config.seed)
    c = math.sqrt(config.n) * config_pi(config)
    return LimitModel(
        C=np.full((k, 1), c),
        beta=np.zeros(1),
        qzz=np.eye(k),
        omega_z=om,
        sigma_v=sv,
        sigma_vu=svu,
        sigma_u2=su2,
    )
