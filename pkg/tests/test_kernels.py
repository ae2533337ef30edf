import numpy as np
import pytest
from numpy.testing import assert_allclose

from weakiv import IVDataset, estimate_2sls, estimate_liml, kp_test, robust_score
from weakiv import _kernels_py, kernels

cython = pytest.importorskip("weakiv._kernels", reason="compiled kernel not built")


def _batch(seed, R=200, n=60, kz=3, pi=0.3):
    r = np.random.default_rng(seed)
    Z = r.standard_normal((R, n, kz))
    e = r.standard_normal((R, n, 2))
    g = np.abs(Z[..., 0])
    u = g * e[..., 0]
    x = pi * Z.sum(axis=2) + g * (0.5 * e[..., 0] + 0.8 * e[..., 1])
    return Z, x, u


@pytest.mark.parametrize("kz", [2, 3, 5])
def test_backends_agree(kz):
    Z, x, y = _batch(kz, kz=kz)
    a = _kernels_py.replicate_stats(Z, x, y, True)
    b = cython.replicate_stats(Z, x, y, True)
    assert_allclose(b, a, rtol=1e-9, atol=1e-12)


def test_matches_library_functions():
    Z, x, y = _batch(5, R=40)
    out = kernels.replicate_stats(Z, x, y, True)
    for r in range(40):
        d = IVDataset(y[r], x[r], Z[r], np.ones((Z.shape[1], 1)))
        b2 = estimate_2sls(d)
        bl = estimate_liml(d)
        assert_allclose(out[r, kernels.B2SLS], b2.beta_hat[0], rtol=1e-10)
        assert_allclose(out[r, kernels.BLIML], bl.beta_hat[0], rtol=1e-9)
        assert_allclose(out[r, kernels.ALPHA], bl.alpha, rtol=1e-8, atol=1e-14)
        assert_allclose(out[r, kernels.JSTAT], robust_score(d, b2).statistic, rtol=1e-8)
        assert_allclose(out[r, kernels.KPSTAT], kp_test(d).statistic, rtol=1e-7)
        assert out[r, kernels.STATUS] == 0


def test_without_demeaning():
    Z, x, y = _batch(9, R=10)
    out = kernels.replicate_stats(Z, x, y, False)
    for r in range(10):
        d = IVDataset(y[r], x[r], Z[r])
        assert_allclose(out[r, kernels.B2SLS], estimate_2sls(d).beta_hat[0], rtol=1e-10)
        assert_allclose(out[r, kernels.KPSTAT], kp_test(d).statistic, rtol=1e-7)


@pytest.mark.parametrize("impl", [_kernels_py, cython], ids=["python", "cython"])
def test_degenerate_replication_is_flagged(impl):
    Z, x, y = _batch(4, R=3)
    Z[1, :, 1] = Z[1, :, 0]  # collinear instruments
    x[2] = 0.0  # no first stage at all
    out = impl.replicate_stats(Z, x, y, True)
    assert out[0, kernels.STATUS] == 0
    for r in (1, 2):
        assert out[r, kernels.STATUS] == 1
        assert np.isnan(out[r, :kernels.STATUS]).all()


def test_backend_selection_follows_environment():
    import os
    import subprocess
    import sys

    code = "from weakiv import kernels; print(kernels.BACKEND)"
    for flag, expected in (("1", "python"), ("", "cython")):
        env = dict(os.environ, WEAKIV_PURE_PYTHON=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == expected
