import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from weakiv import HC0, HC1, HOMOSKEDASTIC, CovarianceSpec, DimensionError, meat, newey_west
from weakiv.covariance import bartlett_weights
from weakiv.errors import ConfigError


def test_nw0_equals_hc0(rng):
    Z = rng.standard_normal((30, 3))
    u = rng.standard_normal(30)
    assert np.array_equal(meat(Z, u, newey_west(0)), meat(Z, u, HC0))


def test_zero_residuals():
    Z = np.arange(12.0).reshape(6, 2)
    assert_allclose(meat(Z, np.zeros(6), newey_west(2)), np.zeros((2, 2)))


def test_newey_west_direct_sum():
    z = np.array([[1.0, 0.5], [-0.3, 2.0], [0.7, -1.1], [1.5, 0.2], [-0.9, 0.4]])
    u = np.array([0.2, -1.0, 0.5, 0.3, -0.6])
    expected = np.zeros((2, 2))
    for t in range(5):
        expected += u[t] ** 2 * np.outer(z[t], z[t])
    w = 0.5
    for t in range(1, 5):
        g = u[t] * u[t - 1] * np.outer(z[t], z[t - 1])
        expected += w * (g + g.T)
    assert_allclose(meat(z, u, newey_west(1)), expected, atol=1e-12)


def test_homoskedastic_and_hc1(rng):
    Z = rng.standard_normal((40, 2))
    u = rng.standard_normal(40)
    assert_allclose(meat(Z, u, HOMOSKEDASTIC), (u @ u / 40) * Z.T @ Z)
    assert_allclose(meat(Z, u, HC1, n_params=1), 40 / 39 * meat(Z, u, HC0))


def test_bartlett_weights():
    assert_allclose(bartlett_weights(3), [0.75, 0.5, 0.25])


def test_dimension_errors():
    with pytest.raises(DimensionError):
        meat(np.ones((5, 2)), np.ones(4))
    with pytest.raises(DimensionError):
        meat(np.ones((2, 2)), np.ones(2))


def test_spec_parse_roundtrip():
    for text in ("hc0", "hc1", "homo", "nw:6"):
        assert str(CovarianceSpec.parse(text)) == text
    with pytest.raises(ConfigError):
        CovarianceSpec.parse("nw:-1")
    with pytest.raises(ConfigError):
        CovarianceSpec("clustered")


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    c=st.floats(-10, 10, allow_nan=False),
    lags=st.integers(0, 4),
)
def test_meat_properties(seed, c, lags):
    r = np.random.default_rng(seed)
    Z = r.standard_normal((25, 3))
    u = r.standard_normal(25)
    for spec in (HC0, newey_west(lags)):
        M = meat(Z, u, spec)
        assert np.abs(M - M.T).max() <= 1e-14 * max(1.0, np.abs(M).max())
    M = meat(Z, u, HC0)
    assert np.linalg.eigvalsh(M).min() >= -1e-10 * np.trace(M)
    # the scale enters squared; exact up to floating-point rounding
    assert_allclose(meat(Z, c * u, HC0), c**2 * M, rtol=1e-13, atol=1e-300)
