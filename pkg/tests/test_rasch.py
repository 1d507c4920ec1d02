import io

import numpy as np
import pytest
from scipy.special import ndtr

from hypoforge.core import METRICS
from hypoforge.errors import InputError
from hypoforge.stats import RaschData, category_probabilities, fit_rasch_map, read_ratings
from hypoforge.stats.rasch import RaschModel, fit_rows, select_prior_sds

from oracles import ordered_probit_oracle


def simulate_ratings(seed, raters=3, hypotheses=4, K=5, metrics=METRICS, reps=1):
    rng = np.random.default_rng(seed)
    tau = np.sort(rng.normal(0, 1.2, K - 1))
    tau += np.linspace(0, 0.5, K - 1)
    beta = {m: (0.0 if i == 0 else rng.normal(0, 0.5)) for i, m in enumerate(metrics)}
    u = {f"R{i}": rng.normal(0, 0.5) for i in range(raters)}
    v = {(f"H{j}", m): rng.normal(0, 0.5) for j in range(hypotheses) for m in metrics}
    rows = []
    for _ in range(reps):
        for r in u:
            for (h, m), vv in v.items():
                eta = beta[m] + u[r] + vv
                p = np.diff(np.concatenate(([0.0], ndtr(tau - eta), [1.0])))
                rows.append((r, h, m, int(rng.choice(K, p=p)) + 1))
    return RaschData(tuple(rows), K)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_central_differences(seed):
    data = simulate_ratings(seed)
    model = RaschModel(data, sigma_u=0.7, sigma_v=1.3, tau_prior_sd=4.0 if seed % 2 else None)
    rng = np.random.default_rng(1000 + seed)
    theta = model.start() + rng.normal(0, 0.3, model.size)
    _, g = model.value_and_grad(theta)
    h = 1e-5
    fd = np.array([
        (model.logpost(theta + h * e) - model.logpost(theta - h * e)) / (2 * h) for e in np.eye(model.size)
    ])
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-6


def test_single_rater_matches_ordered_probit_oracle():
    data = simulate_ratings(3, raters=1, hypotheses=30, K=4, metrics=METRICS[:3])
    fit = fit_rasch_map(data, sigma_u=1.0, sigma_v=0.0)
    metric_index = {m: i for i, m in enumerate(METRICS[:3])}
    y = [r[3] for r in data.ratings]
    groups = [metric_index[r[2]] for r in data.ratings]
    tau, shifts = ordered_probit_oracle(y, groups, data.K)
    # with one rater its effect is pinned at zero by the prior, so the fit is a plain ordered probit
    assert fit.u["R0"] == pytest.approx(0.0, abs=1e-6)
    assert fit.tau == pytest.approx(tau, abs=1e-4)
    assert [fit.beta_m[m] for m in METRICS[:3]] == pytest.approx(shifts, abs=1e-4)


@pytest.mark.parametrize("seed", range(5))
def test_thresholds_strictly_increase(seed):
    fit = fit_rasch_map(simulate_ratings(seed, reps=2))
    assert np.all(np.diff(fit.tau) > 0) and fit.converged


def test_fit_recovers_ordering_of_metric_effects():
    data = simulate_ratings(11, raters=4, hypotheses=10, reps=3)
    fit = fit_rasch_map(data, 0.5, 0.5)
    rows = fit_rows(fit)
    assert rows[0][0] == "tau[1]" and all(se >= 0 for _, _, se in rows)
    probs = fit.category_probabilities("R0", "H0", "novelty")
    assert probs.sum() == pytest.approx(1.0) and (probs >= 0).all()


def test_empty_extreme_category_uses_threshold_prior():
    rows = tuple((f"R{i % 2}", f"H{i % 3}", "novelty", 2 + i % 2) for i in range(12))
    fit = fit_rasch_map(RaschData(rows, 5))
    assert np.all(np.isfinite(fit.tau)) and np.all(np.diff(fit.tau) > 0)
    assert "threshold divergence" in fit.warnings[0]


def test_category_probabilities():
    p = category_probabilities([-1.0, 0.0, 1.0], 0.3)
    assert p.shape == (4,) and p.sum() == pytest.approx(1.0)


def test_empirical_bayes_picks_from_grid():
    data = simulate_ratings(2, raters=2, hypotheses=3, metrics=METRICS[:2])
    assert select_prior_sds(data, grid=(0.5, 1.0)) in {(0.5, 0.5), (0.5, 1.0), (1.0, 0.5), (1.0, 1.0)}


def test_read_ratings_and_errors():
    text = "rater,hypothesis,metric,rating\nR1,H1,novelty,3\nR2,H1,novelty,5\n"
    data = read_ratings(io.StringIO(text))
    assert data.K == 5 and data.raters == ("R1", "R2")
    with pytest.raises(InputError, match="row 3"):
        read_ratings(io.StringIO(text), K=4)
    with pytest.raises(InputError, match="row 2"):
        read_ratings(io.StringIO("rater,hypothesis,metric,rating\nR1,H1,novelty,x\n"))
    with pytest.raises(InputError, match="missing columns"):
        read_ratings(io.StringIO("rater,rating\nR1,3\n"))
    with pytest.raises(InputError):
        RaschData((("R", "H", "novelty", 7),), 5)
    with pytest.raises(InputError):
        RaschModel(data, sigma_u=0.0)
