"""Pareto-smoothed importance-sampling leave-one-out cross-validation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

HIGH_K = 0.7
MIN_DRAWS = 100
MIN_TAIL = 5


class PsisError(ValueError):
    pass


@dataclass(frozen=True)
class PointwiseMatrix:
    """Draws x observations of pointwise log-likelihood for one model."""

    values: np.ndarray
    model: str = "model"
    observations: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.isfinite(values).all():
            raise PsisError(f"{self.model}: pointwise log-likelihood has non-finite entries")
        if self.observations and len(self.observations) != values.shape[1]:
            raise PsisError(f"{self.model}: {len(self.observations)} observation ids for {values.shape[1]} columns")
        object.__setattr__(self, "values", values)

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]

    @property
    def n_obs(self) -> int:
        return self.values.shape[1]

    def to_frame(self) -> pd.DataFrame:
        obs = np.asarray(self.observations or tuple(str(i) for i in range(self.n_obs)), dtype=object)
        return pd.DataFrame(
            {
                "draw": np.repeat(np.arange(self.n_draws), self.n_obs),
                "obs": np.tile(obs, self.n_draws),
                "loglik": self.values.ravel(),
            }
        )

    def to_csv(self, path: PathLike) -> None:
        self.to_frame().to_csv(path, index=False)


def read_pointwise(path: PathLike, model: Optional[str] = None) -> PointwiseMatrix:
    frame = pd.read_csv(path, dtype={"obs": str})
    missing = {"draw", "obs", "loglik"} - set(frame.columns)
    if missing:
        raise PsisError(f"{path}: pointwise file lacks columns {sorted(missing)}")
    order = list(dict.fromkeys(frame["obs"]))
    wide = frame.pivot(index="draw", columns="obs", values="loglik")[order]
    if wide.isna().any().any():
        raise PsisError(f"{path}: every draw must carry every observation")
    return PointwiseMatrix(wide.to_numpy(float), model or Path(path).stem, tuple(order))


def gpdfit(x: np.ndarray) -> tuple[float, float]:
    """Zhang-Stephens estimate of the generalized Pareto shape and scale.

    ``x`` must be positive and sorted ascending. The shape is pulled toward
    0.5 by a weakly informative prior worth ten observations.
    """
    n = len(x)
    prior = 3.0
    m = 30 + int(math.sqrt(n))
    bs = 1.0 - np.sqrt(m / (np.arange(1, m + 1, dtype=float) - 0.5))
    bs /= prior * x[int(n / 4 + 0.5) - 1]
    bs += 1.0 / x[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ks = np.log1p(-bs[:, None] * x).mean(axis=1)
        profile = n * (np.log(-(bs / ks)) - ks - 1.0)
        w = 1.0 / np.exp(profile - profile[:, None]).sum(axis=1)
    w = np.where(np.isfinite(w), w, 0.0)
    keep = w >= 10 * np.finfo(float).eps
    w, bs = w[keep] / w[keep].sum(), bs[keep]
    b = float(np.sum(bs * w))
    k = float(np.mean(np.log1p(-b * x)))
    sigma = -k / b
    a = 10.0
    k = k * n / (n + a) + a * 0.5 / (n + a)
    return k, sigma


def gpinv(prob: np.ndarray, k: float, sigma: float) -> np.ndarray:
    prob = np.asarray(prob, dtype=float)
    if not sigma > 0:
        return np.full_like(prob, np.inf)
    if abs(k) < 1e-12:
        return -sigma * np.log1p(-prob)
    return sigma * np.expm1(-k * np.log1p(-prob)) / k


def tail_length(n_draws: int) -> int:
    return int(math.ceil(min(0.2 * n_draws, 3.0 * math.sqrt(n_draws))))


def psis_smooth(log_ratios: np.ndarray) -> tuple[np.ndarray, float]:
    """Smoothed, normalized log weights and the Pareto shape for one observation."""
    lw = np.asarray(log_ratios, dtype=float)
    lw = lw - lw.max()
    n = len(lw)
    if np.ptp(lw) == 0.0:
        return np.full(n, -math.log(n)), math.nan
    n_tail = tail_length(n)
    order = np.argsort(lw, kind="stable")
    cutoff = lw[order[-n_tail - 1]]
    tail = np.flatnonzero(lw > cutoff)
    if len(tail) < MIN_TAIL:
        return lw - logsumexp(lw), math.inf
    tail = tail[np.argsort(lw[tail], kind="stable")]
    exp_cutoff = math.exp(cutoff)
    excess = np.exp(lw[tail]) - exp_cutoff
    k, sigma = gpdfit(excess)
    if math.isfinite(k):
        quantiles = (np.arange(len(tail)) + 0.5) / len(tail)
        smoothed = lw.copy()
        smoothed[tail] = np.log(gpinv(quantiles, k, sigma) + exp_cutoff)
        lw = np.minimum(smoothed, 0.0)
    return lw - logsumexp(lw), k


@dataclass(frozen=True)
class LooResult:
    model: str
    elpd: float
    se: float
    pointwise: np.ndarray = field(repr=False)
    pareto_k: np.ndarray = field(repr=False)
    lppd: float = math.nan
    observations: tuple[str, ...] = ()

    @property
    def p_loo(self) -> float:
        return self.lppd - self.elpd

    @property
    def n_obs(self) -> int:
        return len(self.pointwise)

    @property
    def n_high_k(self) -> int:
        return int(np.sum(self.pareto_k > HIGH_K))

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "elpd": self.elpd,
            "se": self.se,
            "n_high_k": self.n_high_k,
            "lppd": self.lppd,
            "p_loo": self.p_loo,
        }


def psis_loo(pw: PointwiseMatrix) -> LooResult:
    """Leave-one-out ELPD with Pareto-smoothed importance weights.

    Each observation gets its own smoothed weights and shape estimate
    ``k``; observations with ``k`` above 0.7 are counted in
    ``n_high_k`` and logged, but still contribute to the total.
    """
    ll = pw.values
    n_draws, n_obs = ll.shape
    if tail_length(n_draws) < MIN_TAIL:
        raise PsisError(f"{pw.model}: {n_draws} draws leave fewer than {MIN_TAIL} tail samples")
    if n_draws < MIN_DRAWS:
        logger.warning("%s: only %d draws, PSIS-LOO estimates may be unreliable", pw.model, n_draws)

    elpd_i = np.empty(n_obs)
    k_hat = np.empty(n_obs)
    for i in range(n_obs):
        log_w, k_hat[i] = psis_smooth(-ll[:, i])
        elpd_i[i] = logsumexp(log_w + ll[:, i])
    if np.isinf(k_hat).any():
        logger.warning("%s: %d observations have too few distinct tail weights to smooth", pw.model, int(np.isinf(k_hat).sum()))
    lppd = float(np.sum(logsumexp(ll, axis=0) - math.log(n_draws)))
    result = LooResult(
        model=pw.model,
        elpd=float(elpd_i.sum()),
        se=float(math.sqrt(n_obs * np.var(elpd_i))),
        pointwise=elpd_i,
        pareto_k=k_hat,
        lppd=lppd,
        observations=pw.observations,
    )
    if result.n_high_k:
        logger.warning("%s: %d observations with Pareto k > %.1f", pw.model, result.n_high_k, HIGH_K)
    logger.info("%s: elpd_loo %.2f (SE %.2f)", pw.model, result.elpd, result.se)
    return result


def elpd_difference(a: LooResult, b: LooResult) -> tuple[float, float]:
    """``elpd(a) - elpd(b)`` and the standard error of the paired difference."""
    if a.n_obs != b.n_obs:
        raise PsisError(f"Models {a.model} and {b.model} have {a.n_obs} and {b.n_obs} observations")
    if a.observations and b.observations and a.observations != b.observations:
        raise PsisError(f"Models {a.model} and {b.model} score different observations")
    diff = a.pointwise - b.pointwise
    return float(diff.sum()), float(math.sqrt(a.n_obs * np.var(diff)))


def compare(models: Sequence[LooResult]) -> pd.DataFrame:
    """Models ranked by ELPD, each with its difference from the best one."""
    if len(models) < 1:
        raise PsisError("Nothing to compare")
    ranked = sorted(models, key=lambda r: r.elpd, reverse=True)
    best = ranked[0]
    rows = []
    for res in ranked:
        diff, se = elpd_difference(res, best)
        rows.append(
            {
                "model": res.model,
                "elpd": res.elpd,
                "se": res.se,
                "elpd_diff": diff,
                "se_diff": se,
                "p_loo": res.p_loo,
                "n_high_k": res.n_high_k,
                "report": f"{diff:.2f} ({se:.2f})",
            }
        )
    return pd.DataFrame(rows)
