"""No-U-Turn sampler with warmup adaptation, multi-chain and multi-tree runs.

Trajectories grow by doubling in a random direction; the next state is drawn
multinomially (biased progressive sampling across subtrees, uniform inside
them), and doubling stops on the generalized U-turn criterion. Warmup adapts
the step size by dual averaging and a diagonal inverse metric over doubling
windows.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .config import DEFAULT_SAMPLER, SamplerConfig
from .diagnostics import equal_tailed_interval, ess_bulk, split_rhat
from .model import FamilyData, ModelSpec, PosteriorTarget

logger = logging.getLogger(__name__)

Target = Callable[[np.ndarray], tuple[float, np.ndarray]]
PathLike = Union[str, Path]


class SamplerError(ValueError):
    def __init__(self, message: str, tree_index: Optional[int] = None) -> None:
        super().__init__(message if tree_index is None else f"tree {tree_index}: {message}")
        self.message = message
        self.tree_index = tree_index

    def __reduce__(self):
        return type(self), (self.message, self.tree_index)


@dataclass
class _Point:
    theta: np.ndarray
    r: np.ndarray
    logp: float
    grad: np.ndarray


@dataclass
class _Subtree:
    left: _Point
    right: _Point
    proposal: _Point
    log_weight: float
    rho: np.ndarray
    sum_accept: float
    n_steps: int
    divergent: bool = False
    turning: bool = False


@dataclass
class ChainResult:
    draws: np.ndarray
    divergent: np.ndarray
    accept: np.ndarray
    depth_hits: int
    step_size: float
    inv_metric: np.ndarray


@dataclass
class PosteriorDraws:
    names: tuple[str, ...]
    values: np.ndarray
    chain: np.ndarray
    tree: np.ndarray
    iteration: np.ndarray
    divergent: np.ndarray
    depth_hits: int = 0
    pointwise: Optional[np.ndarray] = field(default=None, repr=False)
    observations: tuple[str, ...] = ()

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def grouped(self, name: str) -> np.ndarray:
        """Draws of one parameter as ``(chains-within-trees, iterations)``."""
        values = self.column(name)
        keys = sorted(set(zip(self.tree.tolist(), self.chain.tolist())))
        rows = []
        for tree_id, chain_id in keys:
            mask = (self.tree == tree_id) & (self.chain == chain_id)
            rows.append(values[mask][np.argsort(self.iteration[mask], kind="stable")])
        size = min(len(r) for r in rows)
        return np.vstack([r[:size] for r in rows])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(self.names))
        frame.insert(0, "iteration", self.iteration)
        frame.insert(0, "tree", self.tree)
        frame.insert(0, "chain", self.chain)
        frame["divergent"] = self.divergent.astype(int)
        return frame

    def to_csv(self, path: PathLike) -> None:
        self.to_frame().to_csv(path, index=False)

    def pointwise_frame(self) -> pd.DataFrame:
        if self.pointwise is None:
            raise ValueError("Draws carry no pointwise log-likelihood")
        n_draws, n_obs = self.pointwise.shape
        return pd.DataFrame(
            {
                "draw": np.repeat(np.arange(n_draws), n_obs),
                "obs": np.tile(np.asarray(self.observations or range(n_obs), dtype=object), n_draws),
                "loglik": self.pointwise.ravel(),
            }
        )

    @classmethod
    def concat(cls, parts: Sequence["PosteriorDraws"]) -> "PosteriorDraws":
        names = parts[0].names
        if any(p.names != names for p in parts):
            raise ValueError("Cannot pool draws with different parameters")
        pointwise = None
        if all(p.pointwise is not None for p in parts):
            pointwise = np.vstack([p.pointwise for p in parts])
        return cls(
            names=names,
            values=np.vstack([p.values for p in parts]),
            chain=np.concatenate([p.chain for p in parts]),
            tree=np.concatenate([p.tree for p in parts]),
            iteration=np.concatenate([p.iteration for p in parts]),
            divergent=np.concatenate([p.divergent for p in parts]),
            depth_hits=sum(p.depth_hits for p in parts),
            pointwise=pointwise,
            observations=parts[0].observations,
        )


def read_draws(path: PathLike) -> PosteriorDraws:
    frame = pd.read_csv(path)
    fixed = {"chain", "tree", "iteration", "divergent"}
    missing = fixed - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: draws file lacks columns {sorted(missing)}")
    names = tuple(c for c in frame.columns if c not in fixed)
    return PosteriorDraws(
        names=names,
        values=frame[list(names)].to_numpy(float),
        chain=frame["chain"].to_numpy(int),
        tree=frame["tree"].to_numpy(int),
        iteration=frame["iteration"].to_numpy(int),
        divergent=frame["divergent"].to_numpy(bool),
    )


class _DualAveraging:
    def __init__(self, target_accept: float, gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75) -> None:
        self.target = target_accept
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(1.0)

    def restart(self, step_size: float) -> None:
        self.mu = math.log(10.0 * step_size)
        self.s_bar = 0.0
        self.x_bar = 0.0
        self.counter = 0

    def update(self, accept: float) -> float:
        self.counter += 1
        accept = min(1.0, accept) if math.isfinite(accept) else 0.0
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        weight = self.counter ** (-self.kappa)
        self.x_bar = weight * x + (1.0 - weight) * self.x_bar
        return math.exp(x)

    @property
    def final(self) -> float:
        return math.exp(self.x_bar)


def metric_windows(n_warmup: int, init: int = 75, term: int = 50, base: int = 25) -> list[tuple[int, int]]:
    """Slow adaptation windows ``[start, end)`` for the inverse metric."""
    if n_warmup < 20:
        return []
    if init + term + base > n_warmup:
        init = int(0.15 * n_warmup)
        term = int(0.1 * n_warmup)
        base = n_warmup - init - term
    windows = []
    start, size, last = init, base, n_warmup - term
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        windows.append((start, end))
        start, size = end, size * 2
    return windows


class NutsChain:
    def __init__(self, target: Target, dim: int, config: SamplerConfig, rng: np.random.Generator) -> None:
        self.target = target
        self.dim = dim
        self.config = config
        self.rng = rng
        self.inv_metric = np.ones(dim)
        self.step_size = 1.0

    def _evaluate(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        try:
            logp, grad = self.target(theta)
        except (FloatingPointError, OverflowError, ValueError, ZeroDivisionError):
            return -math.inf, np.zeros(self.dim)
        grad = np.asarray(grad, dtype=float)
        if not math.isfinite(logp) or not np.isfinite(grad).all():
            return -math.inf, np.zeros(self.dim)
        return float(logp), grad

    def _kinetic(self, r: np.ndarray) -> float:
        return 0.5 * float(np.dot(r, self.inv_metric * r))

    def _leapfrog(self, point: _Point, eps: float) -> _Point:
        r = point.r + 0.5 * eps * point.grad
        theta = point.theta + eps * self.inv_metric * r
        logp, grad = self._evaluate(theta)
        if math.isfinite(logp):
            r = r + 0.5 * eps * grad
        return _Point(theta, r, logp, grad)

    def _momentum(self) -> np.ndarray:
        return self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)

    def _turning(self, left: _Point, right: _Point, rho: np.ndarray) -> bool:
        return (
            float(np.dot(self.inv_metric * left.r, rho)) <= 0.0
            or float(np.dot(self.inv_metric * right.r, rho)) <= 0.0
        )

    def initialize(self, initial: np.ndarray) -> _Point:
        theta = np.asarray(initial, dtype=float)
        for attempt in range(101):
            candidate = theta if attempt == 0 else theta + self.rng.uniform(-2.0, 2.0, self.dim)
            logp, grad = self._evaluate(candidate)
            if math.isfinite(logp):
                return _Point(candidate, np.zeros(self.dim), logp, grad)
        raise SamplerError("Log density not finite at the initial point after 100 jittered retries")

    def find_step_size(self, point: _Point) -> float:
        eps = self.step_size
        r = self._momentum()
        h0 = -point.logp + self._kinetic(r)
        start = _Point(point.theta, r, point.logp, point.grad)

        def log_ratio(step: float) -> float:
            moved = self._leapfrog(start, step)
            if not math.isfinite(moved.logp):
                return -math.inf
            return h0 - (-moved.logp + self._kinetic(moved.r))

        direction = 1 if log_ratio(eps) > math.log(0.8) else -1
        for _ in range(100):
            ratio = log_ratio(eps)
            if direction == 1 and not ratio > math.log(0.8):
                break
            if direction == -1 and not ratio < math.log(0.8):
                break
            eps = eps * 2.0 if direction == 1 else eps / 2.0
            if eps > 1e7 or eps < 1e-10:
                break
        return eps

    def _build(self, point: _Point, direction: int, depth: int, eps: float, h0: float) -> _Subtree:
        if depth == 0:
            moved = self._leapfrog(point, direction * eps)
            energy = -moved.logp + self._kinetic(moved.r) if math.isfinite(moved.logp) else math.inf
            if not math.isfinite(energy):
                energy = math.inf
            delta = h0 - energy
            divergent = (energy - h0) > self.config.max_energy
            accept = min(1.0, math.exp(delta)) if delta < 0 else 1.0
            return _Subtree(moved, moved, moved, delta, moved.r.copy(), accept, 1, divergent)

        first = self._build(point, direction, depth - 1, eps, h0)
        if first.divergent or first.turning:
            return first
        edge = first.right if direction > 0 else first.left
        second = self._build(edge, direction, depth - 1, eps, h0)
        merged = self._merge(first, second, direction, biased=False)
        return merged

    def _merge(self, old: _Subtree, new: _Subtree, direction: int, biased: bool) -> _Subtree:
        sum_accept = old.sum_accept + new.sum_accept
        n_steps = old.n_steps + new.n_steps
        if new.divergent or new.turning:
            return _Subtree(
                old.left, old.right, old.proposal, old.log_weight, old.rho,
                sum_accept, n_steps, new.divergent, new.turning,
            )
        log_weight = float(np.logaddexp(old.log_weight, new.log_weight))
        if biased:
            take_new = math.log(self.rng.random()) < new.log_weight - old.log_weight
        else:
            take_new = math.log(self.rng.random()) < new.log_weight - log_weight
        proposal = new.proposal if take_new else old.proposal
        if direction > 0:
            left, right = old.left, new.right
            inner_a, inner_b = old.right, new.left
            outer_a, outer_b = old.left, new.right
        else:
            left, right = new.left, old.right
            inner_a, inner_b = new.right, old.left
            outer_a, outer_b = new.left, old.right
        rho = old.rho + new.rho
        turning = self._turning(left, right, rho)
        if not turning:
            # Extra checks across the join of the two halves.
            older_first = direction > 0
            rho_a = (old.rho if older_first else new.rho) + inner_b.r
            rho_b = (new.rho if older_first else old.rho) + inner_a.r
            turning = self._turning(outer_a, inner_b, rho_a) or self._turning(inner_a, outer_b, rho_b)
        return _Subtree(left, right, proposal, log_weight, rho, sum_accept, n_steps, False, turning)

    def transition(self, point: _Point, eps: float) -> tuple[_Point, float, bool, bool]:
        r0 = self._momentum()
        start = _Point(point.theta, r0, point.logp, point.grad)
        h0 = -point.logp + self._kinetic(r0)
        tree = _Subtree(start, start, start, 0.0, r0.copy(), 0.0, 0)
        depth = 0
        divergent = False
        while depth < self.config.max_tree_depth:
            direction = 1 if self.rng.random() < 0.5 else -1
            edge = tree.right if direction > 0 else tree.left
            sub = self._build(edge, direction, depth, eps, h0)
            depth += 1
            tree = self._merge(tree, sub, direction, biased=True)
            if sub.divergent:
                divergent = True
                break
            if tree.turning:
                break
        saturated = depth >= self.config.max_tree_depth and not (tree.turning or divergent)
        accept = tree.sum_accept / max(tree.n_steps, 1)
        proposal = tree.proposal
        return _Point(proposal.theta, np.zeros(self.dim), proposal.logp, proposal.grad), accept, divergent, saturated

    def run(self, initial: np.ndarray) -> ChainResult:
        cfg = self.config
        point = self.initialize(initial)
        self.step_size = self.find_step_size(point)
        adapter = _DualAveraging(cfg.target_accept)
        adapter.restart(self.step_size)
        windows = metric_windows(cfg.n_warmup)
        window_ends = {end: start for start, end in windows}
        warm_draws: list[np.ndarray] = []

        draws = np.empty((cfg.n_retained, self.dim))
        divergent = np.zeros(cfg.n_retained, dtype=bool)
        accept_stats = np.empty(cfg.n_retained)
        depth_hits = 0
        eps = self.step_size
        for it in range(cfg.n_iterations):
            warming = it < cfg.n_warmup
            point, accept, diverged, saturated = self.transition(point, eps)
            if warming:
                eps = adapter.update(accept)
                warm_draws.append(point.theta)
                if it + 1 in window_ends:
                    start = window_ends[it + 1]
                    window = np.asarray(warm_draws[start : it + 1])
                    n = len(window)
                    variance = window.var(axis=0, ddof=1) if n > 1 else np.ones(self.dim)
                    self.inv_metric = (n / (n + 5.0)) * variance + 1e-3 * (5.0 / (n + 5.0))
                    self.step_size = eps
                    eps = self.find_step_size(point)
                    adapter.restart(eps)
                if it + 1 == cfg.n_warmup:
                    eps = adapter.final
                    self.step_size = eps
                    logger.debug("Warmup done: step size %.4g", eps)
            else:
                k = it - cfg.n_warmup
                draws[k] = point.theta
                divergent[k] = diverged
                accept_stats[k] = accept
                depth_hits += int(saturated)
        return ChainResult(draws, divergent, accept_stats, depth_hits, eps, self.inv_metric.copy())


def _chain_rng(seed: int, tree_id: int, chain_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, tree_id, chain_id])


def _initial_point(initial, rng: np.random.Generator, dim: int) -> np.ndarray:
    if initial is None:
        return rng.uniform(-0.1, 0.1, dim)
    if callable(initial):
        return np.asarray(initial(rng), dtype=float)
    return np.asarray(initial, dtype=float)


def _run_chain(target: Target, dim: int, config: SamplerConfig, tree_id: int, chain_id: int, initial) -> ChainResult:
    rng = _chain_rng(config.seed, tree_id, chain_id)
    start = _initial_point(initial, rng, dim)
    try:
        return NutsChain(target, dim, config, rng).run(start)
    except SamplerError as exc:
        raise SamplerError(exc.message, tree_id) from None


def _run_chain_star(args: tuple) -> ChainResult:
    return _run_chain(*args)


def _run_units(units: list[tuple], jobs: int) -> list[ChainResult]:
    if jobs <= 1 or len(units) <= 1:
        return [_run_chain_star(unit) for unit in units]
    with ProcessPoolExecutor(max_workers=min(jobs, len(units))) as pool:
        return list(pool.map(_run_chain_star, units))


def _assemble(
    results: Sequence[ChainResult],
    ids: Sequence[tuple[int, int]],
    names: Sequence[str],
    transform: Optional[Callable[[np.ndarray], np.ndarray]],
) -> PosteriorDraws:
    parts = []
    for (tree_id, chain_id), res in zip(ids, results):
        values = res.draws if transform is None else np.apply_along_axis(transform, 1, res.draws)
        n = len(values)
        parts.append(
            PosteriorDraws(
                names=tuple(names),
                values=values,
                chain=np.full(n, chain_id),
                tree=np.full(n, tree_id),
                iteration=np.arange(n),
                divergent=res.divergent,
                depth_hits=res.depth_hits,
            )
        )
    return PosteriorDraws.concat(parts)


def nuts_sample(
    target: Target,
    dim: int,
    config: SamplerConfig = DEFAULT_SAMPLER,
    names: Optional[Sequence[str]] = None,
    initial=None,
    transform: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    tree_id: int = 0,
) -> PosteriorDraws:
    """Run ``config.n_chains`` independent NUTS chains on ``target``.

    ``target`` maps an unconstrained vector of length ``dim`` to
    ``(log density, gradient)``. Each chain adapts its step size and a
    diagonal metric during the ``config.n_warmup`` warmup iterations and keeps the
    rest. ``initial`` is either one vector shared by all chains, a
    callable ``rng -> vector``, or None for uniform draws in [-0.1, 0.1].
    ``transform`` maps each kept draw to the reported scale before it is
    stored under ``names``. Chains run in ``config.jobs`` processes, so
    ``target`` must be picklable when ``jobs > 1``.
    """
    names = tuple(names) if names is not None else tuple(f"theta_{i}" for i in range(dim))
    units = [(target, dim, config, tree_id, chain, initial) for chain in range(config.n_chains)]
    results = _run_units(units, config.jobs)
    draws = _assemble(results, [(tree_id, c) for c in range(config.n_chains)], names, transform)
    _report(draws)
    return draws


def _report(draws: PosteriorDraws) -> None:
    n_div = int(draws.divergent.sum())
    if n_div:
        logger.warning("%d divergent transitions out of %d draws", n_div, draws.n_draws)
    if draws.depth_hits:
        logger.warning("%d transitions hit the maximum tree depth", draws.depth_hits)


def run_family(
    spec: ModelSpec,
    data: FamilyData,
    config: SamplerConfig = DEFAULT_SAMPLER,
    pointwise: bool = True,
) -> PosteriorDraws:
    """Independent NUTS runs on every selected tree, pooled in tree order."""
    tree_ids = list(config.trees) if config.trees is not None else list(range(len(data.trees)))
    for tree_id in tree_ids:
        if not 0 <= tree_id < len(data.trees):
            raise SamplerError("Tree index out of range", tree_id)
    targets = {tree_id: PosteriorTarget(spec, data, tree_id) for tree_id in tree_ids}
    layout = next(iter(targets.values())).layout
    units = []
    ids = []
    for tree_id in tree_ids:
        for chain in range(config.n_chains):
            units.append((targets[tree_id], layout.dim, config, tree_id, chain, layout.initial_point))
            ids.append((tree_id, chain))
    logger.info(
        "Fitting %s model: %d trees x %d chains x %d iterations",
        spec.variant.value, len(tree_ids), config.n_chains, config.n_iterations,
    )
    results = _run_units(units, config.jobs)
    draws = _assemble(results, ids, layout.names, layout.reported)
    if pointwise:
        rows = []
        for (tree_id, _), res in zip(ids, results):
            target = targets[tree_id]
            rows.extend(target.pointwise(theta) for theta in res.draws)
        draws.pointwise = np.vstack(rows)
        draws.observations = data.predictors.characters
    _report(draws)
    return draws


@dataclass(frozen=True)
class ParameterSummary:
    param: str
    median: float
    eti_low: float
    eti_high: float
    rhat: float
    ess: float
    prob_positive: float

    def to_dict(self) -> dict:
        return {
            "param": self.param,
            "median": self.median,
            "eti_low": self.eti_low,
            "eti_high": self.eti_high,
            "rhat": self.rhat,
            "ess": self.ess,
            "prob_positive": self.prob_positive,
        }


def summarize(draws: PosteriorDraws, prob: float = 0.95) -> list[ParameterSummary]:
    if draws.n_draws == 0:
        raise ValueError("No draws to summarize")
    if draws.n_draws < 4:
        raise ValueError("Summaries need at least 4 draws")
    out = []
    for name in draws.names:
        values = draws.column(name)
        low, high = equal_tailed_interval(values, prob)
        grouped = draws.grouped(name)
        out.append(
            ParameterSummary(
                param=name,
                median=float(np.median(values)),
                eti_low=low,
                eti_high=high,
                rhat=split_rhat(grouped),
                ess=ess_bulk(grouped),
                prob_positive=float(np.mean(values > 0)),
            )
        )
    return out


def write_summary(summaries: Sequence[ParameterSummary], path: PathLike, extra: Optional[dict] = None) -> None:
    payload = [s.to_dict() for s in summaries]
    with Path(path).open("w", encoding="utf-8") as handle:
        if extra:
            json.dump({"parameters": payload, **extra}, handle, indent=2)
        else:
            json.dump(payload, handle, indent=2)
        handle.write("\n")
