"""
Simulate-refit-classify validation.

Fits here use short single chains; the full grid at realistic length is
marked slow.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from colex_dynamics.config import SamplerConfig
from colex_dynamics.model import FamilyData, Variant
from colex_dynamics.selection import compare
from colex_dynamics.simval import (
    PATTERNS,
    Recovery,
    RecoveryOutcome,
    SimSetting,
    ValidationStudy,
    classify_recovery,
    fit_variants,
    generate_synthetic,
    recovery_table,
    run_study,
)

from conftest import random_family

TINY = SamplerConfig(n_chains=1, n_iterations=100, seed=3)


@pytest.mark.parametrize(
    "truth,low,high,expected",
    [
        (0.0, -0.5, 0.7, Recovery.T),
        (0.0, 0.1, 0.7, Recovery.FP),
        (0.0, -0.9, -0.2, Recovery.FP),
        (0.8, 0.2, 1.4, Recovery.T),
        (-0.8, -1.4, -0.2, Recovery.T),
        (0.8, -0.1, 1.4, Recovery.FN),
        (0.8, -1.4, -0.3, Recovery.SE),
        (-0.8, 0.3, 1.4, Recovery.SE),
    ],
)
def test_classify_recovery(truth, low, high, expected):
    assert classify_recovery(truth, low, high) is expected


def test_classify_rejects_inverted_interval():
    with pytest.raises(ValueError):
        classify_recovery(0.0, 1.0, -1.0)


def test_setting_sizes():
    assert SimSetting.of("small", True, False, 1).n_taxa == 35
    medium = SimSetting.of("MEDIUM", True, False, 1)
    assert (medium.n_taxa, medium.n_traits) == (75, 85)
    large = SimSetting.of("LARGE", False, True, 1)
    assert (large.n_taxa, large.n_traits) == (100, 200)
    with pytest.raises(ValueError):
        SimSetting.of("HUGE", True, True, 1)


def test_generation_is_deterministic():
    setting = SimSetting.of("SMALL", True, True, 21)
    a, b = generate_synthetic(setting), generate_synthetic(setting)
    np.testing.assert_array_equal(a.traits.values, b.traits.values)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.true_value("p_x") == b.true_value("p_x")
    assert a.traits.values.shape == (35, 85)
    assert a.predictors.names == ("x",)
    assert a.tree.is_ultrametric()


def test_inactive_effects_are_zero():
    bundle = generate_synthetic(SimSetting.of("SMALL", False, False, 21))
    assert bundle.true_value("s_x") == 0.0
    assert bundle.true_value("p_x") == 0.0
    active = generate_synthetic(SimSetting.of("SMALL", True, True, 21))
    # same seed, same draws; only the switches differ
    assert active.truth.p_intercept == bundle.truth.p_intercept
    assert active.true_value("p_x") != 0.0


def test_stationary_effect_shows_in_trait_frequencies():
    for seed in range(200):
        bundle = generate_synthetic(SimSetting.of("LARGE", False, True, seed))
        if abs(bundle.true_value("p_x")) >= 1.0 and bundle.truth.s_intercept >= 0.0:
            break
    else:
        pytest.fail("no seed with a strong stationary effect")
    frequency = (bundle.traits.values == 1).mean(axis=0)
    rho = stats.spearmanr(bundle.x, frequency)[0]
    assert np.sign(rho) == np.sign(bundle.true_value("p_x"))
    assert abs(rho) > 0.3


def test_study_grid_and_stepping():
    study = ValidationStudy(("SMALL", "MEDIUM"), 2, TINY)
    assert len(study.settings) == 2 * 2 * len(PATTERNS)
    seeds = {(s.size, s.seed) for s in study.settings}
    assert len(seeds) == 4
    again = ValidationStudy(("SMALL", "MEDIUM"), 2, TINY)
    assert [s.seed for s in again.settings] == [s.seed for s in study.settings]


def test_tiny_study_schema():
    study = ValidationStudy(("SMALL",), 1, TINY, patterns=((False, False), (True, True)))
    first = study.step()
    assert [o.param for o in first] == ["s_x", "p_x"]
    assert not study.done
    table = study.run()
    assert study.done
    assert list(table.columns) == ["param", "size", "T", "FP", "FN", "SE", "failed"]
    counts = table[["T", "FP", "FN", "SE", "failed"]].sum(axis=1)
    assert list(counts) == [2, 2]

    runs = study.outcomes_frame()
    assert len(runs) == 4
    assert set(runs["label"]) <= {"T", "FP", "FN", "SE", "failed"}

    study.reset()
    assert study.outcomes == [] and study.position == 0
    with pytest.raises(ValueError):
        ValidationStudy(("SMALL",), 0, TINY)


def test_run_study_covers_every_pattern():
    table = run_study(("SMALL",), 1, TINY)
    assert list(table["param"]) == ["s_x", "p_x"]
    counts = table[["T", "FP", "FN", "SE", "failed"]].sum(axis=1)
    assert list(counts) == [len(PATTERNS), len(PATTERNS)]


def test_recovery_table_counts():
    def outcome(param, label):
        return RecoveryOutcome(param, "SMALL", 1, False, False, 0.0, -1.0, 1.0, label)

    outcomes = [
        outcome("s_x", Recovery.T),
        outcome("s_x", Recovery.T),
        outcome("s_x", Recovery.FP),
        outcome("p_x", None),
        outcome("p_x", Recovery.T),
    ]
    table = recovery_table(outcomes, ("SMALL",)).set_index("param")
    assert table.loc["s_x", "T"] == 2
    assert table.loc["s_x", "FP"] == 1
    assert table.loc["p_x", "failed"] == 1
    assert table.loc["p_x", "SE"] == 0


def test_fit_variants_scores_each_variant(rng):
    tree, traits, predictors = random_family(rng, 8, 6)
    data = FamilyData.single(tree, traits, predictors)
    results = fit_variants(data, SamplerConfig(n_chains=1, n_iterations=200, seed=1), (Variant.NULL, Variant.FULL))
    assert set(results) == {"null", "full"}
    for result in results.values():
        assert math.isfinite(result.elpd)
        assert result.n_obs == 6


@pytest.mark.slow
def test_small_study_recovers_effects():
    study = ValidationStudy(("SMALL",), 10, SamplerConfig(n_chains=1, n_iterations=1000, seed=2024))
    table = study.run()
    assert table["SE"].sum() == 0
    assert table["failed"].sum() <= 4

    runs = study.outcomes_frame()
    scored = runs[runs["label"] != "failed"]
    null = scored[scored["truth"] == 0.0]
    assert (null["label"] == "FP").mean() <= 0.1
    strong = scored[scored["truth"].abs() >= 0.75]
    assert len(strong) > 0
    assert (strong["label"] == "T").mean() >= 0.7


@pytest.mark.slow
def test_null_effects_rarely_flagged():
    study = ValidationStudy(("SMALL",), 10, SamplerConfig(n_chains=1, n_iterations=1000, seed=7), patterns=((False, False),))
    study.run()
    runs = study.outcomes_frame()
    scored = runs[runs["label"] != "failed"]
    assert len(scored) >= 16
    assert (scored["label"] == "FP").mean() <= 0.1
    assert (scored["label"] == "SE").sum() == 0


def _ranked(active: bool, seed: int):
    bundle = generate_synthetic(SimSetting.of("SMALL", active, active, seed))
    config = SamplerConfig(n_chains=1, n_iterations=1000, seed=seed)
    results = fit_variants(bundle.family_data(), config, (Variant.FULL, Variant.NULL))
    return compare(list(results.values())).set_index("model")


@pytest.mark.slow
def test_loo_prefers_full_model_when_effects_exist():
    wins = sum(_ranked(True, 500 + seed).index[0] == "full" for seed in range(20))
    assert wins >= 18


@pytest.mark.slow
def test_loo_keeps_null_model_close_without_effects():
    close = 0
    for seed in range(20):
        ranked = _ranked(False, 600 + seed)
        null = ranked.loc["null"]
        close += abs(null["elpd_diff"]) <= 2.0 * null["se_diff"]
    assert close >= 16
