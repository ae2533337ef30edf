import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats as sps

from weakiv import ConfigError, concentration, estimate_2sls, estimate_liml
from weakiv.simulation import (
    Design,
    SimulationConfig,
    abs_normal_moment,
    calibrate_pi,
    config_pi,
    generate_dataset,
    power_curve,
    run_design,
    run_replications,
    summaries_to_csv,
)
from weakiv import kernels


def test_design_parse_roundtrip():
    for text in ("1:0.5", "2:0.2", "power:0.5,1"):
        assert str(Design.parse(text)) == text
    with pytest.raises(ConfigError):
        Design.parse("3:1")
    with pytest.raises(ConfigError):
        Design.parse("1:x")
    with pytest.raises(ConfigError):
        Design("design1", 0.5, omega=1.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        SimulationConfig(replications=0)
    with pytest.raises(ConfigError):
        SimulationConfig(k_z=1)
    with pytest.raises(ConfigError):
        SimulationConfig(rho=1.0)
    with pytest.raises(ConfigError):
        SimulationConfig(calibration="other")


def test_abs_normal_moment():
    assert_allclose(abs_normal_moment(2), 1.0)
    assert_allclose(abs_normal_moment(4), 3.0)
    assert_allclose(abs_normal_moment(1), math.sqrt(2 / math.pi))


def test_calibrate_pi_homoskedastic():
    d = Design("design1", 0.0)
    assert_allclose(calibrate_pi(d, 2, 0.5, 8, 120), 0.18257, atol=1e-5)
    assert_allclose(calibrate_pi(d, 2, 0.5, 8, 120, "trace"), calibrate_pi(d, 2, 0.5, 8, 120))
    assert calibrate_pi(d, 2, 0.5, 0.0, 120) == 0.0


def test_trace_calibration_reproduces_concentration():
    # pooled moments over 10^5 datasets of n=120
    cfg = SimulationConfig(Design("design1", 1.0), n=120, k_z=2, rho=0.5, mu2=8, seed=5, calibration="trace")
    pi = config_pi(cfg)
    r = np.random.default_rng(1)
    N = 100_000 * 120
    Q = np.zeros((2, 2))
    Om = np.zeros((2, 2))
    for _ in range(12):
        z = r.standard_normal((N // 12, 2))
        e = r.standard_normal((N // 12, 2))
        v = np.abs(z[:, 0]) * (0.5 * e[:, 0] + math.sqrt(0.75) * e[:, 1])
        Q += z.T @ z / N
        Om += (z * v[:, None] ** 2).T @ z / N
    mu2 = concentration(pi * np.ones(2), cfg.n * Q, Om, np.linalg.inv(Q)).scalar
    assert abs(mu2 / 8 - 1) < 0.02


def test_homoskedastic_errors_uncorrelated_with_instruments():
    cfg = SimulationConfig(Design("design1", 0.0), n=1_000_000, k_z=2, replications=1)
    d = generate_dataset(cfg, 0)
    c = np.corrcoef(d.y**2, d.Z[:, 0] ** 2)[0, 1]
    assert abs(c) < 3 / math.sqrt(cfg.n)


def test_design1_conditional_variance():
    cfg = SimulationConfig(Design("design1", 1.0), n=1_000_000, k_z=2, replications=1, seed=2)
    d = generate_dataset(cfg, 0)
    z = d.Z[:, 0]
    u2 = d.y**2
    edges = np.quantile(z, np.linspace(0, 1, 41))
    idx = np.clip(np.searchsorted(edges, z, side="right") - 1, 0, 39)
    m_u2 = np.bincount(idx, u2) / np.bincount(idx)
    m_z2 = np.bincount(idx, z**2) / np.bincount(idx)
    slope, intercept = np.polyfit(m_z2, m_u2, 1)
    assert abs(slope - 1) < 0.05
    assert abs(intercept) < 0.05


def test_design2_variance_depends_on_all_instruments():
    cfg = SimulationConfig(Design("design2", 0.5), n=400_000, k_z=3, replications=1, seed=4)
    d = generate_dataset(cfg, 0)
    assert_allclose(np.mean(d.y**2), math.exp(3 * 0.25 / 2), rtol=0.02)
    for j in range(3):
        assert np.corrcoef(d.y**2, d.Z[:, j])[0, 1] > 0.1


def test_power_design_at_null_matches_design1():
    a = generate_dataset(SimulationConfig(Design("power", 0.5, 0.0), n=100_000, seed=1), 0)
    b = generate_dataset(SimulationConfig(Design("design1", 0.5), n=100_000, seed=2), 0)
    assert sps.ks_2samp(a.y**2, b.y**2).statistic <= 0.01


def test_generate_dataset_shape_and_determinism():
    cfg = SimulationConfig(n=50, seed=9)
    a = generate_dataset(cfg, 3)
    b = generate_dataset(cfg, 3)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.Z, b.Z)
    assert a.X_exog.shape == (50, 1)
    assert not np.array_equal(generate_dataset(cfg, 4).y, a.y)


def test_replications_match_library_estimators():
    cfg = SimulationConfig(Design("design1", 0.5), n=80, k_z=3, replications=20, seed=8)
    out = run_replications(cfg, threads=1)
    for i in (0, 7, 19):
        d = generate_dataset(cfg, i)
        assert_allclose(out[i, kernels.B2SLS], estimate_2sls(d).beta_hat[0], rtol=1e-9)
        assert_allclose(out[i, kernels.BLIML], estimate_liml(d).beta_hat[0], rtol=1e-8)


def test_run_design_deterministic_and_thread_invariant():
    cfg = SimulationConfig(Design("design1", 0.5), n=120, k_z=2, rho=0.9, mu2=4, replications=3000, seed=17)
    a = run_design(cfg, threads=1)
    b = run_design(cfg, threads=1)
    c = run_design(cfg, threads=4)
    assert a.to_json() == b.to_json() == c.to_json()
    assert a.replications_completed + a.degenerate_count == 3000
    assert not a.flagged


def test_summary_serialization():
    cfg = SimulationConfig(n=60, replications=200, seed=1)
    s = run_design(cfg, threads=1)
    doc = json.loads(s.to_json())
    assert set(doc["rejection"]) == {"0.1", "0.05", "0.01"}
    csv_text = summaries_to_csv([s, s])
    lines = csv_text.strip().split("\n")
    assert len(lines) == 3
    assert lines[0].startswith("design,n,k_z")


def test_power_curve():
    cfg = SimulationConfig(Design("power", 0.5, 0.0), n=120, k_z=2, rho=0.5, mu2=48, replications=4000, seed=21)
    rows = power_curve(cfg, [0.0, 1.0, 2.0], threads=1)
    tol = 4 * math.sqrt(0.05 * 0.95 / 4000)
    assert abs(rows[0][1] - 0.05) < tol and abs(rows[0][2] - 0.05) < tol
    for w, j, kp in rows[1:]:
        assert j >= 0.9 and kp >= 0.9


def test_power_curve_monotone():
    cfg = SimulationConfig(Design("power", 0.5, 0.0), n=120, k_z=2, rho=0.2, mu2=48, replications=4000, seed=22)
    grid = [0.0, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0]
    rows = power_curve(cfg, grid, threads=1)
    for (_, j0, k0), (_, j1, k1) in zip(rows, rows[1:]):
        assert j1 >= j0 - 0.02 and k1 >= k0 - 0.02


def test_power_curve_requires_power_design():
    with pytest.raises(ConfigError):
        power_curve(SimulationConfig(replications=10), [0.0])
