import numpy as np
import pytest

from hypoforge.stats import _kernels, fit_bradley_terry, simulate_comparisons
from hypoforge.stats.bradley_terry import encode

pytestmark = pytest.mark.skipif(_kernels.numba is None, reason="numba not installed")


def _inputs(seed):
    records = simulate_comparisons([-0.7, 0.1, 0.4, 0.9], alpha=0.2, n=300, tie_rate=0.2, seed=seed)
    _, first, second, code = encode(records)
    y = np.where(code == 1, 1.0, np.where(code == -1, 0.0, 0.5))
    rng = np.random.default_rng(seed)
    return first, second, code, y, np.ones(len(y)), rng.normal(0, 0.5, 4)


def _same(a, b):
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("use_alpha", [True, False])
def test_bt_kernels_agree(seed, use_alpha):
    first, second, _, y, w, beta = _inputs(seed)
    _same(_kernels.bt_loglik(first, second, y, w, 0.3, beta, use_alpha, use_numba=True),
          _kernels.bt_loglik(first, second, y, w, 0.3, beta, use_alpha, use_numba=False))


@pytest.mark.parametrize("seed", range(5))
def test_davidson_kernels_agree(seed):
    first, second, code, _, w, beta = _inputs(seed)
    _same(_kernels.davidson_loglik(first, second, code, w, 0.3, beta, -0.4, True, use_numba=True),
          _kernels.davidson_loglik(first, second, code, w, 0.3, beta, -0.4, True, use_numba=False))


@pytest.mark.parametrize("seed", range(5))
def test_probit_kernels_agree(seed):
    rng = np.random.default_rng(seed)
    tau = np.sort(rng.normal(0, 1, 4))
    eta = rng.normal(0, 1, 200)
    y = rng.integers(1, 6, 200)
    _same(_kernels.probit_loglik(tau, eta, y, use_numba=True), _kernels.probit_loglik(tau, eta, y, use_numba=False))


def test_env_flag_selects_numpy(monkeypatch):
    monkeypatch.setenv(_kernels.ENV_FLAG, "0")
    assert not _kernels.numba_enabled()
    records = simulate_comparisons([0.0, 0.5, 1.0], n=200, tie_rate=0.1, seed=1)
    slow = fit_bradley_terry(records)
    monkeypatch.setenv(_kernels.ENV_FLAG, "1")
    assert _kernels.numba_enabled()
    fast = fit_bradley_terry(records)
    for s in slow.systems:
        assert fast.beta[s] == pytest.approx(slow.beta[s], abs=1e-10)
