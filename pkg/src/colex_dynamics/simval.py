from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .config import SamplerConfig
from .ctmc import simulate_history
from .diagnostics import RHAT_LIMIT
from .model import CoefficientSet, FamilyData, ModelSpec, Variant, link_params
from .sampler import SamplerError, run_family, summarize
from .selection import LooResult, PointwiseMatrix, psis_loo
from .tables import PredictorTable, TraitMatrix
from .trees import PhyloTree, simulate_coalescent

logger = logging.getLogger(__name__)

SIZES = {
    "SMALL": (35, 85),
    "MEDIUM": (75, 85),
    "LARGE": (100, 200),
}
# (s effect active, p effect active)
PATTERNS = ((False, False), (True, False), (False, True), (True, True))
RECOVERED_PARAMS = ("s_x", "p_x")


class Recovery(str, Enum):
    T = "T"
    FP = "FP"
    FN = "FN"
    SE = "SE"


@dataclass(frozen=True)
class SimSetting:
    size: str
    n_taxa: int
    n_traits: int
    s_active: bool
    p_active: bool
    seed: int

    def __post_init__(self) -> None:
        if self.n_taxa < 2 or self.n_traits < 1:
            raise ValueError("A setting needs at least 2 taxa and 1 trait")

    @classmethod
    def of(cls, size: str, s_active: bool, p_active: bool, seed: int) -> "SimSetting":
        key = size.upper()
        if key not in SIZES:
            raise ValueError(f"Unknown size '{size}' (choose from {', '.join(SIZES)})")
        n_taxa, n_traits = SIZES[key]
        return cls(key, n_taxa, n_traits, s_active, p_active, seed)


@dataclass(frozen=True)
class SyntheticBundle:
    setting: SimSetting
    tree: PhyloTree
    x: np.ndarray
    truth: CoefficientSet
    traits: TraitMatrix
    predictors: PredictorTable

    def family_data(self) -> FamilyData:
        return FamilyData.single(self.tree, self.traits, self.predictors)

    def true_value(self, param: str) -> float:
        if param == "s_x":
            return float(self.truth.s_coefs[0])
        if param == "p_x":
            return float(self.truth.p_coefs[0])
        raise KeyError(param)


def generate_synthetic(setting: SimSetting) -> SyntheticBundle:
    """Coalescent tree, one standard normal predictor per trait and simulated tip states.

    Intercepts and slopes are standard normal draws; the slope of an
    inactive component is set to zero after drawing so that the other
    draws do not depend on the activation pattern.
    """
    rng = np.random.default_rng(setting.seed)
    tree = simulate_coalescent(setting.n_taxa, rng=rng)
    x = rng.standard_normal(setting.n_traits)
    p_intercept, p_x, s_intercept, s_x = rng.standard_normal(4)
    truth = CoefficientSet(
        p_intercept=float(p_intercept),
        p_coefs=np.array([p_x if setting.p_active else 0.0]),
        s_intercept=float(s_intercept),
        s_coefs=np.array([s_x if setting.s_active else 0.0]),
    )
    spec = ModelSpec(Variant.FULL)
    characters = tuple(f"trait_{d:03d}" for d in range(setting.n_traits))
    values = np.empty((setting.n_taxa, setting.n_traits), dtype=np.int8)
    for d in range(setting.n_traits):
        states = simulate_history(tree, link_params(spec, truth, [x[d]]), rng=rng)
        values[:, d] = [states[label] for label in tree.tip_labels]
    traits = TraitMatrix(tree.tip_labels, characters, values)
    predictors = PredictorTable(characters, ("x",), x[:, None])
    return SyntheticBundle(setting, tree, x, truth, traits, predictors)


def classify_recovery(truth: float, eti_low: float, eti_high: float) -> Recovery:
    """Label an interval against the true coefficient."""
    if not eti_low <= eti_high:
        raise ValueError(f"Malformed interval [{eti_low}, {eti_high}]")
    covers_zero = eti_low <= 0.0 <= eti_high
    if truth == 0.0:
        return Recovery.T if covers_zero else Recovery.FP
    if covers_zero:
        return Recovery.FN
    if (truth > 0.0) != (eti_low > 0.0):
        return Recovery.SE
    return Recovery.T


@dataclass(frozen=True)
class RecoveryOutcome:
    param: str
    size: str
    seed: int
    s_active: bool
    p_active: bool
    truth: float
    eti_low: float
    eti_high: float
    label: Optional[Recovery]
    rhat: float = math.nan

    @property
    def failed(self) -> bool:
        return self.label is None


def _run_seed(setting_index: int, seed: int, master_seed: int) -> int:
    return int(np.random.SeedSequence([master_seed, setting_index, seed]).generate_state(1)[0])


def fit_and_classify(setting: SimSetting, config: SamplerConfig) -> list[RecoveryOutcome]:
    bundle = generate_synthetic(setting)
    fit_config = replace(config, n_chains=1, seed=setting.seed, trees=None, jobs=1)

    def outcome(param: str, low=math.nan, high=math.nan, label=None, rhat=math.nan) -> RecoveryOutcome:
        return RecoveryOutcome(
            param, setting.size, setting.seed, setting.s_active, setting.p_active,
            bundle.true_value(param), low, high, label, rhat,
        )

    try:
        draws = run_family(ModelSpec(Variant.FULL), bundle.family_data(), fit_config, pointwise=False)
    except SamplerError as exc:
        logger.warning("Fit failed for %s seed %d: %s", setting.size, setting.seed, exc)
        return [outcome(param) for param in RECOVERED_PARAMS]

    summaries = {s.param: s for s in summarize(draws)}
    converged = all(s.rhat <= RHAT_LIMIT for s in summaries.values())
    results = []
    for param in RECOVERED_PARAMS:
        s = summaries[param]
        label = classify_recovery(bundle.true_value(param), s.eti_low, s.eti_high) if converged else None
        results.append(outcome(param, s.eti_low, s.eti_high, label, s.rhat))
    if not converged:
        logger.warning("Fit did not converge for %s seed %d (R-hat > %.2f)", setting.size, setting.seed, RHAT_LIMIT)
    return results


def _fit_star(args: tuple) -> list[RecoveryOutcome]:
    return fit_and_classify(*args)


class ValidationStudy:
    def __init__(
        self,
        sizes: Sequence[str] = ("SMALL",),
        n_seeds: int = 10,
        config: SamplerConfig = SamplerConfig(n_chains=1, n_iterations=1000),
        patterns: Sequence[tuple[bool, bool]] = PATTERNS,
    ) -> None:
        """Seed x activation-pattern grid of simulate-refit-classify runs.

        Every pattern of one seed shares its tree and predictor; ``step`` runs
        one simulation and ``run`` drains the grid in order.
        """
        if n_seeds < 1:
            raise ValueError("n_seeds must be at least 1")
        self.sizes = tuple(s.upper() for s in sizes)
        self.n_seeds = n_seeds
        self.config = config
        self.patterns = tuple(patterns)
        self.settings = self._build_grid()
        self.outcomes: list[RecoveryOutcome] = []
        self.position = 0

    def _build_grid(self) -> list[SimSetting]:
        grid = []
        for size_index, size in enumerate(self.sizes):
            for seed_index in range(self.n_seeds):
                seed = _run_seed(size_index, seed_index, self.config.seed)
                for s_active, p_active in self.patterns:
                    grid.append(SimSetting.of(size, s_active, p_active, seed))
        return grid

    @property
    def done(self) -> bool:
        return self.position >= len(self.settings)

    def reset(self) -> None:
        self.outcomes.clear()
        self.position = 0

    def step(self) -> list[RecoveryOutcome]:
        if self.done:
            raise ValueError("Study already complete")
        setting = self.settings[self.position]
        results = fit_and_classify(setting, self.config)
        self.outcomes.extend(results)
        self.position += 1
        return results

    def run(self, jobs: int = 1) -> pd.DataFrame:
        pending = [(setting, self.config) for setting in self.settings[self.position :]]
        logger.info("Running %d validation fits", len(pending))
        if jobs > 1 and len(pending) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for results in pool.map(_fit_star, pending):
                    self.outcomes.extend(results)
        else:
            for args in pending:
                self.outcomes.extend(_fit_star(args))
        self.position = len(self.settings)
        return self.table()

    def outcomes_frame(self) -> pd.DataFrame:
        rows = []
        for o in self.outcomes:
            rows.append(
                {
                    "param": o.param, "size": o.size, "seed": o.seed,
                    "s_active": o.s_active, "p_active": o.p_active, "truth": o.truth,
                    "eti_low": o.eti_low, "eti_high": o.eti_high, "rhat": o.rhat,
                    "label": o.label.value if o.label else "failed",
                }
            )
        return pd.DataFrame(rows)

    def table(self) -> pd.DataFrame:
        return recovery_table(self.outcomes, self.sizes)


def recovery_table(outcomes: Iterable[RecoveryOutcome], sizes: Sequence[str]) -> pd.DataFrame:
    outcomes = list(outcomes)
    rows = []
    for param in RECOVERED_PARAMS:
        for size in sizes:
            subset = [o for o in outcomes if o.param == param and o.size == size]
            row = {"param": param, "size": size}
            for label in Recovery:
                row[label.value] = sum(1 for o in subset if o.label is label)
            row["failed"] = sum(1 for o in subset if o.failed)
            rows.append(row)
    table = pd.DataFrame(rows, columns=["param", "size", "T", "FP", "FN", "SE", "failed"])
    if table["SE"].sum() > 0:
        logger.warning("Validation produced %d sign errors", int(table["SE"].sum()))
    if table["failed"].sum() > 0:
        logger.warning("%d validation fits failed and were excluded", int(table["failed"].sum()))
    return table


def run_study(
    sizes: Sequence[str] = ("SMALL",),
    n_seeds: int = 10,
    config: SamplerConfig = SamplerConfig(n_chains=1, n_iterations=1000),
    jobs: int = 1,
) -> pd.DataFrame:
    return ValidationStudy(sizes, n_seeds, config).run(jobs)


def fit_variants(
    data: FamilyData,
    config: SamplerConfig,
    variants: Sequence[Variant] = tuple(Variant),
) -> dict[str, LooResult]:
    """PSIS-LOO of each model variant on the same dataset."""
    results = {}
    for variant in variants:
        draws = run_family(ModelSpec(variant), data, config)
        pw = PointwiseMatrix(draws.pointwise, variant.value, draws.observations)
        results[variant.value] = psis_loo(pw)
    return results
