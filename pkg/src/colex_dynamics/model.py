"""Distributional regression of speed and stationary probability on predictors.

Per character i:

    p_i = logistic(bp_0 + bp . x_i)     (or one constant p for all characters)
    s_i = exp(bs_0 + bs . x_i)          (or one constant s for all characters)

Constants are sampled on log / logit scales; the Jacobian of that change of
variables is part of the density the sampler sees.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from .ctmc import RateParams
from .likelihood import CompiledTree, tip_codes
from .tables import PredictorTable, TraitMatrix
from .trees import PhyloTree, TreeSample

logger = logging.getLogger(__name__)

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class ModelError(ValueError):
    pass


class Variant(str, Enum):
    FULL = "full"
    STATIONARY = "stationary-only"
    SPEED = "speed-only"
    NULL = "null"

    @property
    def regress_p(self) -> bool:
        return self in (Variant.FULL, Variant.STATIONARY)

    @property
    def regress_s(self) -> bool:
        return self in (Variant.FULL, Variant.SPEED)


@dataclass(frozen=True)
class ModelPriors:
    coef_mean: float = 0.0
    coef_sd: float = 1.0
    speed_log_mean: float = 0.0
    speed_log_sd: float = 1.0


@dataclass(frozen=True)
class ModelSpec:
    variant: Variant = Variant.FULL
    priors: ModelPriors = field(default_factory=ModelPriors)

    @classmethod
    def of(cls, variant: str) -> "ModelSpec":
        try:
            return cls(Variant(variant))
        except ValueError:
            choices = ", ".join(v.value for v in Variant)
            raise ModelError(f"Unknown model variant '{variant}' (choose from {choices})") from None


@dataclass(frozen=True)
class CoefficientSet:
    p_intercept: Optional[float] = None
    p_coefs: Optional[np.ndarray] = None
    p_const: Optional[float] = None
    s_intercept: Optional[float] = None
    s_coefs: Optional[np.ndarray] = None
    s_const: Optional[float] = None

    def check(self, spec: ModelSpec, n_predictors: Optional[int] = None) -> None:
        v = spec.variant
        for regressed, intercept, coefs, const, tag in (
            (v.regress_p, self.p_intercept, self.p_coefs, self.p_const, "p"),
            (v.regress_s, self.s_intercept, self.s_coefs, self.s_const, "s"),
        ):
            if regressed:
                if intercept is None or coefs is None or const is not None:
                    raise ModelError(f"Variant {v.value} regresses {tag}: needs intercept and coefficients only")
                if n_predictors is not None and len(coefs) != n_predictors:
                    raise ModelError(f"{tag} coefficients have length {len(coefs)}, expected {n_predictors}")
            elif const is None or intercept is not None or coefs is not None:
                raise ModelError(f"Variant {v.value} holds {tag} constant: needs a constant only")

    @classmethod
    def zeros(cls, spec: ModelSpec, n_predictors: int) -> "CoefficientSet":
        v = spec.variant
        return cls(
            p_intercept=0.0 if v.regress_p else None,
            p_coefs=np.zeros(n_predictors) if v.regress_p else None,
            p_const=None if v.regress_p else 0.5,
            s_intercept=0.0 if v.regress_s else None,
            s_coefs=np.zeros(n_predictors) if v.regress_s else None,
            s_const=None if v.regress_s else 1.0,
        )


class ParameterLayout:
    """Order of the unconstrained sampling vector and of the reported draw columns."""

    def __init__(self, spec: ModelSpec, predictor_names: Sequence[str]) -> None:
        self.spec = spec
        self.predictor_names = tuple(predictor_names)
        k = len(self.predictor_names)
        names: list[str] = []
        if spec.variant.regress_p:
            self.p_slice = slice(0, k + 1)
            names += ["p_intercept"] + [f"p_{n}" for n in self.predictor_names]
        else:
            self.p_slice = slice(0, 1)
            names.append("p")
        start = len(names)
        if spec.variant.regress_s:
            self.s_slice = slice(start, start + k + 1)
            names += ["s_intercept"] + [f"s_{n}" for n in self.predictor_names]
        else:
            self.s_slice = slice(start, start + 1)
            names.append("s")
        self.names = tuple(names)

    @property
    def dim(self) -> int:
        return len(self.names)

    def pack(self, coefs: CoefficientSet) -> np.ndarray:
        coefs.check(self.spec, len(self.predictor_names))
        theta = np.zeros(self.dim)
        if self.spec.variant.regress_p:
            theta[self.p_slice] = np.concatenate([[coefs.p_intercept], coefs.p_coefs])
        else:
            theta[self.p_slice] = logit(coefs.p_const)
        if self.spec.variant.regress_s:
            theta[self.s_slice] = np.concatenate([[coefs.s_intercept], coefs.s_coefs])
        else:
            theta[self.s_slice] = math.log(coefs.s_const)
        return theta

    def unpack(self, theta: np.ndarray) -> CoefficientSet:
        return self.from_reported(self.reported(theta))

    def reported(self, theta: np.ndarray) -> np.ndarray:
        values = np.array(theta, dtype=float)
        if not self.spec.variant.regress_p:
            values[self.p_slice] = expit(values[self.p_slice])
        if not self.spec.variant.regress_s:
            values[self.s_slice] = np.exp(values[self.s_slice])
        return values

    def from_reported(self, values: np.ndarray) -> CoefficientSet:
        values = np.asarray(values, dtype=float)
        p_block, s_block = values[self.p_slice], values[self.s_slice]
        return CoefficientSet(
            p_intercept=float(p_block[0]) if self.spec.variant.regress_p else None,
            p_coefs=p_block[1:].copy() if self.spec.variant.regress_p else None,
            p_const=None if self.spec.variant.regress_p else float(p_block[0]),
            s_intercept=float(s_block[0]) if self.spec.variant.regress_s else None,
            s_coefs=s_block[1:].copy() if self.spec.variant.regress_s else None,
            s_const=None if self.spec.variant.regress_s else float(s_block[0]),
        )

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        # Coefficients jittered around 0; constants at their prior medians (p=0.5, s=exp(mean)).
        theta = np.zeros(self.dim)
        if self.spec.variant.regress_p:
            theta[self.p_slice] = rng.uniform(-0.1, 0.1, self.p_slice.stop - self.p_slice.start)
        if self.spec.variant.regress_s:
            theta[self.s_slice] = rng.uniform(-0.1, 0.1, self.s_slice.stop - self.s_slice.start)
        else:
            theta[self.s_slice] = self.spec.priors.speed_log_mean
        return theta


def link_params(spec: ModelSpec, coefs: CoefficientSet, x_i: Sequence[float]) -> RateParams:
    x_i = np.asarray(x_i, dtype=float)
    coefs.check(spec)
    if spec.variant.regress_p:
        if len(coefs.p_coefs) != len(x_i):
            raise ModelError(f"Predictor row has {len(x_i)} values, coefficients have {len(coefs.p_coefs)}")
        p = float(expit(coefs.p_intercept + np.dot(coefs.p_coefs, x_i)))
    else:
        p = coefs.p_const
    if spec.variant.regress_s:
        if len(coefs.s_coefs) != len(x_i):
            raise ModelError(f"Predictor row has {len(x_i)} values, coefficients have {len(coefs.s_coefs)}")
        s = float(np.exp(coefs.s_intercept + np.dot(coefs.s_coefs, x_i)))
    else:
        s = coefs.s_const
    return RateParams(s=s, p=p)


def _normal_logpdf(x: np.ndarray, mean: float, sd: float) -> float:
    z = (np.asarray(x, dtype=float) - mean) / sd
    return float(np.sum(-0.5 * z * z - _HALF_LOG_2PI - math.log(sd)))


def log_prior(spec: ModelSpec, coefs: CoefficientSet, jacobian: bool = False) -> float:
    """Prior log density on the natural scale, or on the sampling scale when ``jacobian``."""
    coefs.check(spec)
    pr = spec.priors
    total = 0.0
    if spec.variant.regress_p:
        total += _normal_logpdf(np.concatenate([[coefs.p_intercept], coefs.p_coefs]), pr.coef_mean, pr.coef_sd)
    else:
        p = coefs.p_const
        if not 0.0 < p < 1.0:
            return -math.inf
        if jacobian:
            total += math.log(p) + math.log1p(-p)
    if spec.variant.regress_s:
        total += _normal_logpdf(np.concatenate([[coefs.s_intercept], coefs.s_coefs]), pr.coef_mean, pr.coef_sd)
    else:
        s = coefs.s_const
        if not s > 0.0:
            return -math.inf
        # LogNormal(s) = Normal(log s) / s; the 1/s cancels against the Jacobian on the log scale.
        total += _normal_logpdf(math.log(s), pr.speed_log_mean, pr.speed_log_sd)
        if not jacobian:
            total -= math.log(s)
    return total


@dataclass(frozen=True)
class FamilyData:
    """Trait matrix, aligned predictors and the tree sample of one language family."""

    traits: TraitMatrix
    predictors: PredictorTable
    trees: TreeSample

    def __post_init__(self) -> None:
        if set(self.traits.characters) != set(self.predictors.characters):
            raise ModelError("Trait matrix columns and predictor rows name different characters")
        if self.traits.characters != self.predictors.characters:
            object.__setattr__(self, "traits", self.traits.select_characters(self.predictors.characters))
        taxa = set(self.trees.taxa)
        absent = [t for t in self.traits.taxa if t not in taxa]
        if absent:
            raise ModelError(f"Taxa missing from the trees: {', '.join(absent[:5])}")

    @classmethod
    def single(cls, tree: PhyloTree, traits: TraitMatrix, predictors: PredictorTable) -> "FamilyData":
        return cls(traits, predictors, TreeSample((tree,), source="single"))

    def tip_codes(self, tree: PhyloTree) -> np.ndarray:
        return tip_codes(tree.tip_labels, self.traits.rows(), self.traits.n_characters)


class PosteriorTarget:
    """Log posterior and gradient over the unconstrained vector for one tree."""

    def __init__(self, spec: ModelSpec, data: FamilyData, tree_index: int = 0) -> None:
        self.spec = spec
        self.layout = ParameterLayout(spec, data.predictors.names)
        self.x = data.predictors.values
        tree = data.trees[tree_index]
        self.compiled = CompiledTree(tree)
        self.partials = self.compiled.tip_partials(data.tip_codes(tree))

    def _rates(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        v = self.spec.variant
        n = self.x.shape[0]
        with np.errstate(over="ignore"):
            if v.regress_p:
                block = theta[self.layout.p_slice]
                p = expit(block[0] + self.x @ block[1:])
            else:
                p = np.full(n, expit(theta[self.layout.p_slice][0]))
            if v.regress_s:
                block = theta[self.layout.s_slice]
                s = np.exp(block[0] + self.x @ block[1:])
            else:
                s = np.full(n, math.exp(min(theta[self.layout.s_slice][0], 700.0)))
        return p, s, p * (1.0 - p), s

    def _prior(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        v = self.spec.variant
        pr = self.spec.priors
        value = 0.0
        grad = np.zeros_like(theta)
        for regressed, block in ((v.regress_p, self.layout.p_slice), (v.regress_s, self.layout.s_slice)):
            if regressed:
                beta = theta[block]
                value += _normal_logpdf(beta, pr.coef_mean, pr.coef_sd)
                grad[block] = -(beta - pr.coef_mean) / pr.coef_sd**2
        if not v.regress_p:
            # Uniform(0, 1) on p with the logit Jacobian p(1 - p).
            u = theta[self.layout.p_slice][0]
            value += -np.logaddexp(0.0, -u) - np.logaddexp(0.0, u)
            grad[self.layout.p_slice] = 1.0 - 2.0 * expit(u)
        if not v.regress_s:
            u = theta[self.layout.s_slice][0]
            value += _normal_logpdf(u, pr.speed_log_mean, pr.speed_log_sd)
            grad[self.layout.s_slice] = -(u - pr.speed_log_mean) / pr.speed_log_sd**2
        return float(value), grad

    def pointwise(self, theta: np.ndarray) -> np.ndarray:
        p, s, _, _ = self._rates(np.asarray(theta, dtype=float))
        return self.compiled.loglik(self.partials, s, p).loglik

    def __call__(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        v = self.spec.variant
        p, s, dp_deta, ds_deta = self._rates(theta)
        result = self.compiled.loglik(self.partials, s, p, grad=True)
        prior, grad = self._prior(theta)
        value = prior + float(np.sum(result.loglik))

        g_p = result.d_p * dp_deta
        g_s = result.d_s * ds_deta
        block = self.layout.p_slice
        if v.regress_p:
            grad[block.start] += np.sum(g_p)
            grad[block.start + 1 : block.stop] += self.x.T @ g_p
        else:
            grad[block.start] += np.sum(g_p)
        block = self.layout.s_slice
        if v.regress_s:
            grad[block.start] += np.sum(g_s)
            grad[block.start + 1 : block.stop] += self.x.T @ g_s
        else:
            grad[block.start] += np.sum(g_s)
        if not np.isfinite(value):
            return -math.inf, grad
        return value, grad


def log_posterior(
    spec: ModelSpec,
    coefs: CoefficientSet,
    data: FamilyData,
    tree_index: int = 0,
) -> tuple[float, np.ndarray]:
    """Value and gradient on the sampling scale; the gradient follows `ParameterLayout` order."""
    target = PosteriorTarget(spec, data, tree_index)
    return target(target.layout.pack(coefs))


def pointwise_loglik(spec: ModelSpec, coefs: CoefficientSet, data: FamilyData, tree_index: int = 0) -> np.ndarray:
    target = PosteriorTarget(spec, data, tree_index)
    return target.pointwise(target.layout.pack(coefs))
