from __future__ import annotations

import numpy as np
import pytest

from colex_dynamics.ctmc import (
    RateParams,
    rates_from_params,
    simulate_history,
    transition_matrix,
)
from colex_dynamics.trees import parse_newick

from conftest import expm_taylor


def _random_params(rng):
    return RateParams(s=float(rng.uniform(0.01, 50.0)), p=float(rng.uniform(0.01, 0.99)))


def test_transition_matrix_matches_matrix_exponential(rng):
    for _ in range(1000):
        rp = _random_params(rng)
        t = float(rng.uniform(0, 100))
        P = transition_matrix(rp, t)
        expected = expm_taylor(rates_from_params(rp).generator(), t)
        np.testing.assert_allclose(P, expected, rtol=0, atol=1e-10)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_short_branches_match_matrix_exponential(rng):
    for _ in range(200):
        rp = _random_params(rng)
        t = float(10 ** rng.uniform(-9, -2))
        np.testing.assert_allclose(
            transition_matrix(rp, t), expm_taylor(rates_from_params(rp).generator(), t), rtol=0, atol=1e-12
        )


def test_chapman_kolmogorov(rng):
    for _ in range(200):
        rp = _random_params(rng)
        t1, t2 = rng.uniform(0, 50, size=2)
        np.testing.assert_allclose(
            transition_matrix(rp, t1) @ transition_matrix(rp, t2),
            transition_matrix(rp, t1 + t2),
            rtol=0,
            atol=1e-12,
        )


def test_stationary_distribution_is_preserved(rng):
    for _ in range(200):
        rp = _random_params(rng)
        pi = np.array([1 - rp.p, rp.p])
        np.testing.assert_allclose(pi @ transition_matrix(rp, float(rng.uniform(0, 100))), pi, rtol=0, atol=1e-12)


def test_time_rescaling(rng):
    for _ in range(200):
        rp = _random_params(rng)
        t = float(rng.uniform(0, 100))
        c = float(np.exp(rng.uniform(-3, 3)))
        np.testing.assert_allclose(
            transition_matrix(RateParams(rp.s / c, rp.p), c * t), transition_matrix(rp, t), rtol=0, atol=1e-12
        )


def test_state_relabelling(rng):
    swap = np.array([[0, 1], [1, 0]])
    for _ in range(200):
        rp = _random_params(rng)
        t = float(rng.uniform(0, 100))
        np.testing.assert_allclose(
            transition_matrix(RateParams(rp.s, 1 - rp.p), t),
            swap @ transition_matrix(rp, t) @ swap,
            rtol=0,
            atol=1e-12,
        )


def test_identity_at_zero_and_stationary_limit():
    rp = RateParams(s=0.5, p=0.3)
    np.testing.assert_allclose(transition_matrix(rp, 0.0), np.eye(2))
    far = transition_matrix(rp, 200.0)
    np.testing.assert_allclose(far, [[0.7, 0.3], [0.7, 0.3]], atol=1e-12)
    assert rp.stationary == pytest.approx((0.7, 0.3))


def test_rate_matrix_roundtrip():
    rates = rates_from_params(RateParams(s=2.0, p=0.25))
    assert rates.q_gain == pytest.approx(0.5)
    assert rates.q_loss == pytest.approx(1.5)
    assert rates.speed == pytest.approx(2.0)
    assert rates.stationary_p == pytest.approx(0.25)


@pytest.mark.parametrize("s,p", [(0.0, 0.5), (-1.0, 0.5), (1.0, 0.0), (1.0, 1.0), (float("inf"), 0.5)])
def test_invalid_rate_params(s, p):
    with pytest.raises(ValueError):
        RateParams(s=s, p=p)


def test_negative_branch_length():
    with pytest.raises(ValueError):
        transition_matrix(RateParams(1.0, 0.5), -0.1)


def test_simulated_tip_frequency_matches_stationary():
    tree = parse_newick("((A:50,B:50):50,C:100);")
    rp = RateParams(s=1.0, p=0.3)
    rng = np.random.default_rng(5)
    states = [simulate_history(tree, rp, rng=rng)["A"] for _ in range(4000)]
    assert np.mean(states) == pytest.approx(0.3, abs=0.03)


def test_fixed_root_state_on_short_branches():
    tree = parse_newick("((A:1e-9,B:1e-9):1e-9,C:2e-9);")
    history = simulate_history(tree, RateParams(1.0, 0.5), root_state=1, seed=1)
    assert history == {"A": 1, "B": 1, "C": 1}
    with pytest.raises(ValueError):
        simulate_history(tree, RateParams(1.0, 0.5), root_state=2, seed=1)


def test_simulation_is_deterministic(coalescent_tree):
    rp = RateParams(2.0, 0.4)
    assert simulate_history(coalescent_tree, rp, seed=9) == simulate_history(coalescent_tree, rp, seed=9)
