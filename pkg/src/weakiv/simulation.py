"""Monte Carlo engine for weak-instrument designs with heteroskedastic errors.

Data follow ``y = x beta + u`` (``beta = 0``) and ``x = pi * sum_j z_j + v`` with
standard normal instruments and errors ``(u, v) = g(z) (u*, v*)`` where
``(u*, v*)`` are unit-variance normals with correlation ``rho``. The designs
differ in the scale ``g``:

``design1``
    ``g(z) = |z_1|^a``.
``design2``
    ``g(z) = sqrt(exp(a * sum_j z_j))``.
``power``
    as ``design1`` but with ``omega * z_1`` added to ``u``, so ``omega != 0``
    violates instrument exogeneity.

Every regression includes an intercept, which is partialled out.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import special, stats

from . import kernels
from .core import IVDataset
from .errors import ConfigError

DESIGNS = ("design1", "design2", "power")
CALIBRATIONS = ("variance", "trace")
DEFAULT_LEVELS = (0.10, 0.05, 0.01)
FLAG_RATE = 0.001


@dataclass(frozen=True)
class Design:
    kind: str = "design1"
    alpha: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        if self.kind not in DESIGNS:
            raise ConfigError(f"unknown design {self.kind!r}")
        if not self.alpha >= 0 and self.kind != "power":
            raise ConfigError("heteroskedasticity strength must be non-negative")
        if self.omega != 0 and self.kind != "power":
            raise ConfigError("omega is only defined for the power design")

    @classmethod
    def parse(cls, text: str) -> "Design":
        """CLI spelling: ``1:A``, ``2:A`` or ``power:A,W``."""
        try:
            kind, _, rest = text.partition(":")
            kind = {"1": "design1", "2": "design2"}.get(kind, kind)
            if kind == "power":
                a, _, w = rest.partition(",")
                return cls(kind, float(a), float(w or 0.0))
            return cls(kind, float(rest))
        except ValueError as exc:
            raise ConfigError(f"cannot parse design {text!r}") from exc

    def __str__(self) -> str:
        if self.kind == "power":
            return f"power:{self.alpha:g},{self.omega:g}"
        return f"{self.kind[-1]}:{self.alpha:g}"


def abs_normal_moment(p: float) -> float:
    """``E|z|^p`` for standard normal ``z``."""
    return 2 ** (p / 2) * special.gamma((p + 1) / 2) / math.sqrt(math.pi)


@dataclass(frozen=True)
class SimulationConfig:
    design: Design = field(default_factory=Design)
    n: int = 120
    k_z: int = 2
    rho: float = 0.5
    mu2: float = 8.0
    replications: int = 20000
    seed: int = 0
    levels: tuple = DEFAULT_LEVELS
    calibration: str = "variance"

    def __post_init__(self):
        if self.k_z < 2:
            raise ConfigError("need at least two instruments")
        if self.n <= self.k_z + 1:
            raise ConfigError("sample size too small for the instrument count")
        if not -1 < self.rho < 1:
            raise ConfigError("rho must lie in (-1, 1)")
        if not self.mu2 >= 0:
            raise ConfigError("mu2 must be non-negative")
        if self.replications < 1:
            raise ConfigError("replications must be positive")
        if not all(0 < lv <= 1 for lv in self.levels):
            raise ConfigError("levels must lie in (0, 1]")
        if self.calibration not in CALIBRATIONS:
            raise ConfigError(f"calibration must be one of {CALIBRATIONS}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["design"] = asdict(self.design)
        d["levels"] = list(self.levels)
        return d


def error_variance(design: Design, k_z: int) -> float:
    """``E[g(z)^2]``, the unconditional variance of ``v``."""
    if design.kind == "design2":
        return math.exp(k_z * design.alpha**2 / 2)
    return abs_normal_moment(2 * design.alpha)


def trace_vzv(design: Design, k_z: int) -> float:
    """``tr E[v^2 z z']`` with standard normal instruments."""
    a = design.alpha
    if design.kind == "design2":
        return math.exp(k_z * a**2 / 2) * k_z * (1 + a**2)
    return abs_normal_moment(2 * a + 2) + (k_z - 1) * abs_normal_moment(2 * a)


def calibrate_pi(
    design: Design, k_z: int, rho: float, mu2_target: float, n: int, calibration: str = "variance"
) -> float:
    """First-stage coefficient giving the target instrument strength.

    ``variance`` sets ``pi = sqrt(mu2 E[v^2] / (k_z n))``, strength measured
    against the unconditional first-stage error variance. ``trace`` uses the
    heteroskedastic concentration parameter,
    ``pi = sqrt(mu2 tr(E[v^2 zz']) / (k_z^2 n))``. The two coincide under
    homoskedasticity. ``rho`` does not enter either rule.
    """
    if not mu2_target >= 0:
        raise ConfigError("mu2 must be non-negative")
    if calibration == "variance":
        return math.sqrt(mu2_target * error_variance(design, k_z) / (k_z * n))
    if calibration == "trace":
        return math.sqrt(mu2_target * trace_vzv(design, k_z) / (k_z**2 * n))
    raise ConfigError(f"unknown calibration {calibration!r}")


def config_pi(config: SimulationConfig) -> float:
    return calibrate_pi(
        config.design, config.k_z, config.rho, config.mu2, config.n, config.calibration
    )


def replication_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one replication.

    The Philox key comes from ``seed``; the replication index occupies the
    upper counter words, so streams never overlap and do not depend on the
    order in which replications run.
    """
    key = np.random.SeedSequence(seed).generate_state(2, np.uint64)
    counter = np.array([0, 0, index & (2**64 - 1), index >> 64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def _draw(config: SimulationConfig, pi: float, rng: np.random.Generator):
    n, k = config.n, config.k_z
    Z = rng.standard_normal((n, k))
    e = rng.standard_normal((n, 2))
    us = e[:, 0]
    vs = config.rho * e[:, 0] + math.sqrt(1 - config.rho**2) * e[:, 1]
    d = config.design
    if d.kind == "design2":
        g = np.exp(0.5 * d.alpha * Z.sum(axis=1))
    else:
        g = np.abs(Z[:, 0]) ** d.alpha
    u = g * us
    v = g * vs
    if d.kind == "power" and d.omega != 0:
        u = u + d.omega * Z[:, 0]
    x = pi * Z.sum(axis=1) + v
    return Z, x, u


def generate_dataset(
    config: SimulationConfig, replication_index: int, pi: float | None = None
) -> IVDataset:
    """One simulated dataset; the intercept is carried in ``X_exog``."""
    if pi is None:
        pi = config_pi(config)
    Z, x, y = _draw(config, pi, replication_rng(config.seed, replication_index))
    return IVDataset(y=y, X=x, Z=Z, X_exog=np.ones((config.n, 1)))


def _chunk(config: SimulationConfig, pi: float, start: int, stop: int) -> np.ndarray:
    m = stop - start
    Z = np.empty((m, config.n, config.k_z))
    x = np.empty((m, config.n))
    y = np.empty((m, config.n))
    for i in range(m):
        Z[i], x[i], y[i] = _draw(config, pi, replication_rng(config.seed, start + i))
    return kernels.replicate_stats(Z, x, y, True)


def default_threads() -> int:
    env = os.environ.get("WEAKIV_THREADS")
    if env:
        try:
            t = int(env)
        except ValueError as exc:
            raise ConfigError("WEAKIV_THREADS must be an integer") from exc
        if t < 1:
            raise ConfigError("WEAKIV_THREADS must be positive")
        return t
    return os.cpu_count() or 1


def run_replications(config: SimulationConfig, threads: int | None = None) -> np.ndarray:
    """Per-replication statistics, shape ``(replications, 6)``.

    Columns follow :mod:`weakiv.kernels` (``b2sls, bliml, alpha, J, KP,
    status``). The result depends only on ``config``; ``threads`` changes
    speed, not values.
    """
    threads = default_threads() if threads is None else int(threads)
    if threads < 1:
        raise ConfigError("threads must be positive")
    pi = config_pi(config)
    R = config.replications
    size = int(max(1, min(500, 2_000_000 // (config.n * config.k_z))))
    bounds = [(s, min(s + size, R)) for s in range(0, R, size)]
    if threads == 1 or len(bounds) == 1:
        parts = [_chunk(config, pi, a, b) for a, b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda ab: _chunk(config, pi, *ab), bounds))
    return np.concatenate(parts, axis=0)


@dataclass(frozen=True)
class SimulationSummary:
    """Aggregates of a Monte Carlo run.

    ``rejection`` maps each level to ``(J rate, KP rate)`` against the
    chi-square(k_z - 1) critical value. Bias and range refer to
    ``beta_hat - beta`` for 2SLS and LIML. ``flagged`` is set when more than
    0.1% of replications were degenerate.
    """

    config: SimulationConfig
    rejection: dict
    median_bias: tuple
    range_90_10: tuple
    pi_used: float
    replications_completed: int
    degenerate_count: int
    flagged: bool

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "rejection": {
                f"{lv:g}": {"J": j, "KP": kp} for lv, (j, kp) in sorted(self.rejection.items())
            },
            "median_bias": {"2sls": self.median_bias[0], "liml": self.median_bias[1]},
            "range_90_10": {"2sls": self.range_90_10[0], "liml": self.range_90_10[1]},
            "pi_used": self.pi_used,
            "replications_completed": self.replications_completed,
            "degenerate_count": self.degenerate_count,
            "flagged": self.flagged,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self) -> dict:
        c = self.config
        row = {
            "design": str(c.design),
            "n": c.n,
            "k_z": c.k_z,
            "rho": c.rho,
            "mu2": c.mu2,
            "replications": c.replications,
            "seed": c.seed,
            "pi": self.pi_used,
        }
        for lv in sorted(self.rejection, reverse=True):
            j, kp = self.rejection[lv]
            row[f"J_{lv:g}"] = j
            row[f"KP_{lv:g}"] = kp
        row.update(
            {
                "median_bias_2sls": self.median_bias[0],
                "median_bias_liml": self.median_bias[1],
                "range_2sls": self.range_90_10[0],
                "range_liml": self.range_90_10[1],
                "completed": self.replications_completed,
                "degenerate": self.degenerate_count,
                "flagged": int(self.flagged),
            }
        )
        return row


def summarize(config: SimulationConfig, out: np.ndarray) -> SimulationSummary:
    ok = out[:, kernels.STATUS] == 0
    good = out[ok]
    n_ok = int(ok.sum())
    df = config.k_z - 1
    rejection = {}
    for lv in config.levels:
        crit = stats.chi2.isf(lv, df)
        if n_ok:
            rejection[lv] = (
                float(np.mean(good[:, kernels.JSTAT] > crit)),
                float(np.mean(good[:, kernels.KPSTAT] > crit)),
            )
        else:
            rejection[lv] = (math.nan, math.nan)

    def _bias_range(col):
        if not n_ok:
            return math.nan, math.nan
        b = good[:, col]
        lo, med, hi = np.percentile(b, [10, 50, 90])
        return float(med), float(hi - lo)

    b2, r2 = _bias_range(kernels.B2SLS)
    bl, rl = _bias_range(kernels.BLIML)
    degenerate = config.replications - n_ok
    return SimulationSummary(
        config=config,
        rejection=rejection,
        median_bias=(b2, bl),
        range_90_10=(r2, rl),
        pi_used=config_pi(config),
        replications_completed=n_ok,
        degenerate_count=degenerate,
        flagged=degenerate > FLAG_RATE * config.replications,
    )


def run_design(config: SimulationConfig, threads: int | None = None) -> SimulationSummary:
    """Run all replications of ``config`` and summarize them."""
    return summarize(config, run_replications(config, threads))


def power_curve(config: SimulationConfig, omega_grid, threads: int | None = None, level: float = 0.05):
    """Rejection rates of J and KP at ``level`` along a grid of ``omega``.

    Returns a list of ``(omega, J rate, KP rate)``.
    """
    if config.design.kind != "power":
        raise ConfigError("power_curve needs the power design")
    rows = []
    for w in omega_grid:
        cfg = replace(config, design=replace(config.design, omega=float(w)), levels=(level,))
        s = run_design(cfg, threads)
        j, kp = s.rejection[level]
        rows.append((float(w), j, kp))
    return rows


def summaries_to_csv(summaries) -> str:
    rows = [s.csv_row() for s in summaries]
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
