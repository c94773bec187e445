"""Negative binomial regression with a log link.

Mean ``mu = exp(b0 + X b)`` and variance ``mu + mu**2 / theta``. Fitted by
alternating IRLS for the coefficients at fixed ``theta`` with a Newton ascent
on ``log(theta)``, starting from a Poisson fit and a moment estimate of
``theta``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import digamma, gammaln, polygamma

from .tables import PredictorTable, TraitMatrix

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

STAR_LEVELS = ((0.01, "***"), (0.05, "**"), (0.1, "*"))
_MAX_LOG_THETA = math.log(1e10)
_MIN_LOG_THETA = math.log(1e-8)


class NegBinError(ValueError):
    pass


@dataclass(frozen=True)
class CountDataset:
    counts: np.ndarray
    X: np.ndarray
    names: tuple[str, ...] = ()
    pair_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=float)
        X = np.asarray(self.X, dtype=float).reshape(len(counts), -1)
        if (counts < 0).any() or not np.allclose(counts, np.round(counts)):
            raise NegBinError("Counts must be non-negative integers")
        if not np.isfinite(X).all():
            raise NegBinError("Predictors must be finite")
        names = self.names or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise NegBinError(f"{len(names)} names for {X.shape[1]} predictor columns")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "names", tuple(names))

    @property
    def n_obs(self) -> int:
        return len(self.counts)

    @classmethod
    def from_tables(cls, traits: TraitMatrix, predictors: PredictorTable) -> "CountDataset":
        # count = languages colexifying the pair
        aligned = traits.select_characters(predictors.characters)
        return cls(aligned.colexified_counts(), predictors.values, predictors.names, predictors.characters)

    def intercept_only(self) -> "CountDataset":
        return CountDataset(self.counts, np.empty((self.n_obs, 0)), (), self.pair_ids)

    def design(self) -> np.ndarray:
        return np.column_stack([np.ones(self.n_obs), self.X])


def read_counts(path: PathLike, names: Optional[Sequence[str]] = None) -> CountDataset:
    frame = pd.read_csv(path)
    if "count" not in frame.columns:
        raise NegBinError(f"{path}: needs a 'count' column")
    skip = {"pair_id", "count"}
    wanted = list(names) if names is not None else [c for c in frame.columns if c not in skip]
    ids = tuple(frame["pair_id"].astype(str)) if "pair_id" in frame.columns else ()
    return CountDataset(frame["count"].to_numpy(float), frame[wanted].to_numpy(float), tuple(wanted), ids)


def nb_loglik(y: np.ndarray, mu: np.ndarray, theta: float) -> np.ndarray:
    return (
        gammaln(y + theta)
        - gammaln(theta)
        - gammaln(y + 1.0)
        - theta * np.log1p(mu / theta)
        + y * (np.log(mu) - np.log(theta + mu))
    )


def poisson_loglik(y: np.ndarray, mu: np.ndarray) -> np.ndarray:
    return stats.poisson.logpmf(y, mu)


def _theta_score(y: np.ndarray, mu: np.ndarray, theta: float) -> tuple[float, float]:
    score = np.sum(digamma(y + theta) - digamma(theta) + math.log(theta) + 1.0 - np.log(theta + mu) - (y + theta) / (theta + mu))
    curvature = np.sum(
        polygamma(1, y + theta) - polygamma(1, theta) + 1.0 / theta - 2.0 / (theta + mu) + (y + theta) / (theta + mu) ** 2
    )
    return float(score), float(curvature)


def _mean(Z: np.ndarray, beta: np.ndarray) -> np.ndarray:
    return np.exp(np.clip(Z @ beta, -700.0, 700.0))


def _irls(
    Z: np.ndarray,
    y: np.ndarray,
    beta: np.ndarray,
    theta: Optional[float],
    max_iter: int = 100,
) -> np.ndarray:
    """Weighted least squares iterations; ``theta=None`` fits a Poisson model."""

    def loglik(b: np.ndarray) -> float:
        mu = _mean(Z, b)
        ll = poisson_loglik(y, mu) if theta is None else nb_loglik(y, mu, theta)
        return float(np.sum(ll))

    current = loglik(beta)
    for _ in range(max_iter):
        eta = Z @ beta
        mu = _mean(Z, beta)
        w = mu if theta is None else mu / (1.0 + mu / theta)
        z = eta + (y - mu) / mu
        sw = np.sqrt(w)
        proposal = np.linalg.lstsq(Z * sw[:, None], z * sw, rcond=None)[0]
        step = proposal - beta
        for _ in range(30):
            candidate = beta + step
            value = loglik(candidate)
            if value >= current:
                break
            step = step / 2.0
        else:
            break
        moved = np.max(np.abs(candidate - beta)) if len(beta) else 0.0
        beta, gain, current = candidate, value - current, value
        if moved < 1e-12 or abs(gain) < 1e-14 * (abs(current) + 1.0):
            break
    return beta


def _theta_ml(y: np.ndarray, mu: np.ndarray, theta: float, max_iter: int = 50) -> float:
    """Profile maximum of the log-likelihood in theta, by Newton steps on log(theta)."""

    def loglik(u: float) -> float:
        return float(np.sum(nb_loglik(y, mu, math.exp(u))))

    u = math.log(theta)
    current = loglik(u)
    for _ in range(max_iter):
        score, curvature = _theta_score(y, mu, math.exp(u))
        t = math.exp(u)
        grad = t * score
        hess = t * t * curvature + t * score
        step = -grad / hess if hess < 0 else math.copysign(1.0, grad)
        for _ in range(40):
            candidate = min(max(u + step, _MIN_LOG_THETA), _MAX_LOG_THETA)
            value = loglik(candidate)
            if value >= current:
                break
            step /= 2.0
        else:
            break
        done = abs(candidate - u) < 1e-10
        u, current = candidate, value
        if done:
            break
    return math.exp(u)


@dataclass
class NegBinFit:
    names: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    theta: float
    theta_se: float
    loglik: float
    n_obs: int
    converged: bool
    n_iter: int
    history: list[float] = field(default_factory=list)
    fitted: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_params(self) -> int:
        return len(self.coef)

    @property
    def aic(self) -> float:
        # coefficients plus theta
        return 2.0 * (self.n_params + 1) - 2.0 * self.loglik

    def table(self) -> pd.DataFrame:
        z, p = wald_pvalues(self)
        return pd.DataFrame(
            {
                "term": list(self.names),
                "coef": self.coef,
                "se": self.se,
                "z": z,
                "p": p,
                "stars": [stars(v) for v in p],
            }
        )

    def to_dict(self) -> dict:
        z, p = wald_pvalues(self)
        return {
            "coefficients": {
                name: {"coef": float(b), "se": float(s), "z": float(zz), "p": float(pp), "stars": stars(pp)}
                for name, b, s, zz, pp in zip(self.names, self.coef, self.se, z, p)
            },
            "theta": self.theta,
            "theta_se": self.theta_se,
            "loglik": self.loglik,
            "aic": self.aic,
            "observations": self.n_obs,
            "converged": self.converged,
            "iterations": self.n_iter,
        }


def fit_negbin(
    data: CountDataset,
    theta: Optional[float] = None,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> NegBinFit:
    """Maximum-likelihood negative binomial regression of ``data.counts``.

    Starts from a Poisson IRLS fit and a moment estimate of ``theta``, then
    alternates IRLS on the coefficients with a profile Newton step on
    ``log(theta)`` until the log-likelihood changes by less than ``tol``
    (relative). A given ``theta`` is held fixed instead, leaving a single
    IRLS pass and a NaN ``theta_se``. Standard errors come from the inverse
    Fisher information at the final ``theta``.

    Raises NegBinError for too few observations, all-zero counts, a rank
    deficient design or a non-positive ``theta``.
    """
    y = data.counts
    Z = data.design()
    n, k = Z.shape
    if n <= k + 1:
        raise NegBinError(f"Need more than {k + 1} observations for {k} coefficients and theta, got {n}")
    if not np.any(y > 0):
        raise NegBinError("All counts are zero")
    if np.linalg.matrix_rank(Z) < k:
        raise NegBinError("Design matrix is rank deficient")
    if theta is not None and not theta > 0:
        raise NegBinError("theta must be positive")

    beta = np.zeros(k)
    beta[0] = math.log(np.mean(y))
    beta = _irls(Z, y, beta, None)
    mu = _mean(Z, beta)
    if theta is None:
        moments = np.sum((y / mu - 1.0) ** 2)
        current_theta = n / moments if moments > 0 else 1e8
        current_theta = min(max(current_theta, 1e-4), 1e8)
    else:
        current_theta = float(theta)

    history = [float(np.sum(nb_loglik(y, mu, current_theta)))]
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        beta = _irls(Z, y, beta, current_theta)
        mu = _mean(Z, beta)
        if theta is not None:
            history.append(float(np.sum(nb_loglik(y, mu, current_theta))))
            converged = True
            break
        current_theta = _theta_ml(y, mu, current_theta)
        history.append(float(np.sum(nb_loglik(y, mu, current_theta))))
        logger.debug("Outer iteration %d: loglik %.10g theta %.6g", iteration, history[-1], current_theta)
        if abs(history[-1] - history[-2]) <= tol * (abs(history[-1]) + 0.1):
            converged = True
            break
    if not converged:
        logger.warning("Negative binomial fit did not converge in %d iterations", max_iter)

    w = mu / (1.0 + mu / current_theta)
    try:
        cov = np.linalg.inv(Z.T @ (Z * w[:, None]))
    except np.linalg.LinAlgError:
        raise NegBinError("Information matrix is singular") from None
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    if theta is None:
        _, curvature = _theta_score(y, mu, current_theta)
        theta_se = math.sqrt(-1.0 / curvature) if curvature < 0 else math.nan
    else:
        theta_se = math.nan

    return NegBinFit(
        names=("intercept",) + data.names,
        coef=beta,
        se=se,
        theta=current_theta,
        theta_se=theta_se,
        loglik=history[-1],
        n_obs=n,
        converged=converged,
        n_iter=iteration,
        history=history,
        fitted=mu,
    )


def wald_pvalues(fit: NegBinFit) -> tuple[np.ndarray, np.ndarray]:
    if np.any(fit.se <= 0):
        raise NegBinError("Zero standard error")
    z = fit.coef / fit.se
    return z, 2.0 * stats.norm.sf(np.abs(z))


def stars(p: float) -> str:
    for level, mark in STAR_LEVELS:
        if p < level:
            return mark
    return ""
