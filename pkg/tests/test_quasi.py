import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hypoforge.errors import InputError
from hypoforge.stats import comparison_interval, fit_bradley_terry, quasi_variances, simulate_comparisons, write_fit_csv

from oracles import quasi_variance_cd


def _additive(q, c):
    """Covariance whose contrast variances are exactly q_i + q_j: diag(q) plus any c 1' + 1 c'."""
    q, c = np.asarray(q, float), np.asarray(c, float)
    return np.diag(q) + c[:, None] + c[None, :]


@pytest.mark.parametrize("q,c", [
    ([0.1, 0.2, 0.3], [0.0, 0.0, 0.0]),
    ([0.05, 0.4, 0.01, 0.2], [0.3, -0.1, 0.2, 0.0]),
    ([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [0.5] * 6),
])
def test_additive_structure_is_exact(q, c):
    qv = quasi_variances(_additive(q, c))
    assert max(abs(e) for e in qv.relative_errors.values()) <= 1e-10
    assert list(qv.q.values()) == pytest.approx(q, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 7), st.integers(0, 10**6))
def test_random_psd_matches_coordinate_descent(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n + 3, n))
    S = X.T @ X / (n + 3) + 0.1 * np.eye(n)
    qv = quasi_variances(S)
    oracle = quasi_variance_cd(S)
    assert np.array(list(qv.q.values())) == pytest.approx(oracle, abs=1e-6)


def test_two_systems_split_equally():
    qv = quasi_variances(np.array([[0.3, 0.1], [0.1, 0.5]]), ["A", "B"])
    assert qv.q == {"A": pytest.approx(0.3), "B": pytest.approx(0.3)} and "two systems" in qv.note


def test_log_scale_is_close_and_positive():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(8, 5))
    S = X.T @ X / 8
    a, b = quasi_variances(S), quasi_variances(S, scale="log")
    assert all(v > 0 for v in b.q.values())
    assert np.array(list(b.q.values())) == pytest.approx(np.array(list(a.q.values())), rel=0.5)


def test_fit_input_and_intervals():
    fit = fit_bradley_terry(simulate_comparisons([-1, 0, 1], alpha=0.3, n=600, tie_rate=0.1, seed=9))
    qv = quasi_variances(fit)
    assert qv.systems == fit.systems
    lo, hi = comparison_interval(fit, qv, "S3")
    assert hi - lo == pytest.approx(2 * 1.96 * np.sqrt(qv.q["S3"]))
    buf = io.StringIO()
    rows = write_fit_csv(fit, qv, buf)
    assert buf.getvalue().splitlines()[0] == "system,beta,quasi_variance,lo95,hi95"
    assert [r["system"] for r in rows] == ["S1", "S2", "S3"]


def test_errors():
    with pytest.raises(InputError):
        quasi_variances(np.eye(1))
    with pytest.raises(InputError):
        quasi_variances(np.ones((2, 3)))
    with pytest.raises(InputError):
        quasi_variances(np.ones((3, 3)))
    with pytest.raises(InputError):
        quasi_variances(np.eye(3), scale="cubic")
