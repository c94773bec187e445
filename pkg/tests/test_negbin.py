from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import optimize, stats

from colex_dynamics.negbin import (
    CountDataset,
    NegBinError,
    fit_negbin,
    nb_loglik,
    poisson_loglik,
    read_counts,
    stars,
    wald_pvalues,
)
from colex_dynamics.tables import PredictorTable, TraitMatrix


def _simulate(rng, n=300, beta=(1.0, 0.5, -0.3), theta=5.0):
    X = rng.standard_normal((n, len(beta) - 1))
    mu = np.exp(beta[0] + X @ np.asarray(beta[1:]))
    # Gamma-Poisson mixture with shape theta has variance mu + mu^2 / theta.
    y = rng.poisson(rng.gamma(theta, mu / theta))
    return CountDataset(y, X, tuple("abc"[: len(beta) - 1]))


def test_nb_loglik_matches_scipy():
    y = np.array([0, 1, 4, 10])
    mu = np.array([0.5, 2.0, 3.0, 7.5])
    theta = 2.5
    expected = stats.nbinom.logpmf(y, theta, theta / (theta + mu))
    np.testing.assert_allclose(nb_loglik(y, mu, theta), expected, rtol=1e-12)


def test_intercept_only_fits_log_mean(rng):
    y = rng.poisson(rng.gamma(2.0, 2.0, 200))
    fit = fit_negbin(CountDataset(y, np.empty((200, 0))))
    assert fit.names == ("intercept",)
    assert fit.coef[0] == pytest.approx(math.log(y.mean()), abs=1e-10)
    assert fit.converged


def test_recovers_coefficients_and_dispersion(rng):
    data = _simulate(rng)
    fit = fit_negbin(data)
    assert fit.converged
    assert fit.names == ("intercept", "a", "b")
    np.testing.assert_allclose(fit.coef, [1.0, 0.5, -0.3], atol=4 * fit.se.max())
    assert fit.theta == pytest.approx(5.0, rel=0.6)
    assert fit.theta_se > 0


def test_history_never_decreases(rng):
    fit = fit_negbin(_simulate(rng))
    assert np.all(np.diff(fit.history) >= -1e-9)


def test_poisson_data_gives_large_theta(rng):
    X = rng.standard_normal((400, 1))
    y = rng.poisson(np.exp(1.5 + 0.4 * X[:, 0]))
    fit = fit_negbin(CountDataset(y, X))
    assert fit.theta > 10
    np.testing.assert_allclose(fit.coef, [1.5, 0.4], atol=0.1)


def test_predictor_rescaling_rescales_coefficient(rng):
    data = _simulate(rng)
    scaled = CountDataset(data.counts, data.X * np.array([2.0, 1.0]), data.names)
    a, b = fit_negbin(data), fit_negbin(scaled)
    assert b.coef[1] == pytest.approx(a.coef[1] / 2.0, rel=1e-4)
    assert b.loglik == pytest.approx(a.loglik, rel=1e-6)


def test_fixed_theta(rng):
    fit = fit_negbin(_simulate(rng), theta=3.0)
    assert fit.theta == 3.0
    assert math.isnan(fit.theta_se)


def test_table_and_report(rng):
    fit = fit_negbin(_simulate(rng))
    table = fit.table()
    assert list(table.columns) == ["term", "coef", "se", "z", "p", "stars"]
    z, p = wald_pvalues(fit)
    np.testing.assert_allclose(z, fit.coef / fit.se)
    assert table.loc[0, "stars"] == "***"
    assert fit.aic == pytest.approx(2 * 4 - 2 * fit.loglik)
    payload = fit.to_dict()
    assert set(payload["coefficients"]) == {"intercept", "a", "b"}
    assert payload["observations"] == 300


@pytest.mark.parametrize("p,mark", [(0.001, "***"), (0.02, "**"), (0.07, "*"), (0.2, ""), (0.01, "**")])
def test_stars(p, mark):
    assert stars(p) == mark


def test_invalid_inputs():
    with pytest.raises(NegBinError):
        CountDataset(np.array([1, -1, 2]), np.zeros((3, 1)))
    with pytest.raises(NegBinError):
        CountDataset(np.array([1.5, 1, 2]), np.zeros((3, 1)))
    with pytest.raises(NegBinError):
        fit_negbin(CountDataset(np.zeros(10), np.arange(10.0)))
    with pytest.raises(NegBinError):
        fit_negbin(CountDataset(np.array([1, 2]), np.array([0.0, 1.0])))
    X = np.column_stack([np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(NegBinError):
        fit_negbin(CountDataset(np.arange(10), X))
    with pytest.raises(NegBinError):
        fit_negbin(CountDataset(np.arange(10), np.arange(10.0)), theta=0.0)


def test_counts_from_tables():
    traits = TraitMatrix(
        ("l1", "l2", "l3"), ("a::b", "c::d"), np.array([[1, 0], [1, -1], [0, 1]])
    )
    predictors = PredictorTable(("c::d", "a::b"), ("assoc",), np.array([[0.5], [1.5]]))
    data = CountDataset.from_tables(traits, predictors)
    np.testing.assert_array_equal(data.counts, [1, 2])
    assert data.pair_ids == ("c::d", "a::b")
    assert data.intercept_only().X.shape == (2, 0)


def test_read_counts(tmp_path):
    path = tmp_path / "counts.csv"
    path.write_text("pair_id,count,assoc,freq\na::b,3,0.1,2.0\nc::d,0,0.4,1.0\n")
    data = read_counts(path)
    assert data.names == ("assoc", "freq")
    np.testing.assert_array_equal(data.counts, [3, 0])
    path.write_text("pair_id,assoc\na::b,0.1\n")
    with pytest.raises(NegBinError):
        read_counts(path)


def _poisson_glm(X, y):
    Z = np.column_stack([np.ones(len(y)), X])

    def objective(b):
        mu = np.exp(Z @ b)
        return np.sum(mu - y * (Z @ b)), Z.T @ (mu - y)

    def hessian(b):
        mu = np.exp(Z @ b)
        return Z.T @ (Z * mu[:, None])

    start = np.zeros(Z.shape[1])
    start[0] = math.log(y.mean())
    result = optimize.minimize(objective, start, jac=True, hess=hessian, method="trust-exact", options={"gtol": 1e-10})
    return result.x, np.sqrt(np.diag(np.linalg.inv(hessian(result.x))))


def test_huge_fixed_theta_matches_poisson_glm(rng):
    X = rng.standard_normal((300, 3))
    y = rng.poisson(np.exp(1.0 + X @ np.array([0.5, -0.3, 0.2])))
    fit = fit_negbin(CountDataset(y, X, ("a", "b", "c")), theta=1e8)
    coef, se = _poisson_glm(X, y)
    np.testing.assert_allclose(fit.coef, coef, rtol=0, atol=1e-6)
    np.testing.assert_allclose(fit.se, se, rtol=1e-5)
    per_obs = nb_loglik(y, fit.fitted, 1e8) - poisson_loglik(y, fit.fitted)
    assert np.max(np.abs(per_obs)) < 1e-4


@pytest.mark.slow
def test_wald_interval_coverage():
    rng = np.random.default_rng(99)
    truth = np.array([1.0, 0.5, -0.3, 0.2])
    covered = np.zeros(len(truth), dtype=int)
    for _ in range(100):
        fit = fit_negbin(_simulate(rng, beta=tuple(truth)))
        assert fit.converged
        covered += np.abs(fit.coef - truth) <= 1.96 * fit.se
    assert np.all(covered >= 90), covered
