import numpy as np
import pytest

from weakiv import IVDataset

# lines recorded by the acceptance module, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def make_data(rng, n=120, kz=2, rho=0.5, het=0.5, pi=0.2, beta=0.0, intercept=False):
    """Heteroskedastic single-regressor IV data."""
    Z = rng.standard_normal((n, kz))
    e = rng.standard_normal((n, 2))
    s = np.abs(Z[:, 0]) ** het
    u = s * e[:, 0]
    v = s * (rho * e[:, 0] + np.sqrt(1 - rho**2) * e[:, 1])
    x = pi * Z.sum(axis=1) + v
    y = beta * x + u
    exog = np.ones((n, 1)) if intercept else None
    return IVDataset(y=y, X=x, Z=Z, X_exog=exog)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def fixture20():
    """Small fixed dataset: n=20, k_z=2, k_x=1."""
    r = np.random.default_rng(20)
    return make_data(r, n=20, kz=2, rho=0.6, het=1.0, pi=0.8, beta=0.5)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
