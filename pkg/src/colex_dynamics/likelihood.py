"""Felsenstein pruning for binary characters.

`CompiledTree` evaluates many characters at once: partial likelihoods are
``(n_characters,)`` arrays per state, rescaled at every internal node, and
derivatives with respect to each character's ``(s, p)`` are carried forward
through the recursion alongside the partials.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .ctmc import RateParams, transition_matrix
from .trees import PhyloTree

logger = logging.getLogger(__name__)

MISSING = -1


class LikelihoodError(ValueError):
    pass


@dataclass(frozen=True)
class TipStates:
    states: Mapping[str, Optional[int]]
    character: str = ""

    def code(self, label: str) -> int:
        if label not in self.states:
            raise LikelihoodError(f"No state for tip '{label}' in character '{self.character}'")
        value = self.states[label]
        if value is None:
            return MISSING
        if value not in (0, 1):
            raise LikelihoodError(f"State {value!r} for tip '{label}' is not 0, 1 or missing")
        return int(value)


@dataclass
class PruningResult:
    loglik: np.ndarray
    d_s: Optional[np.ndarray] = None
    d_p: Optional[np.ndarray] = None


class CompiledTree:
    def __init__(self, tree: PhyloTree) -> None:
        self.tree = tree
        self.order = tree.postorder()
        self.tip_labels = tree.tip_labels
        self._slot = {node: k for k, node in enumerate(tree.tips)}
        self._children = [tree.children(i) for i in range(tree.n_nodes)]
        self._lengths = [tree.length(i) for i in range(tree.n_nodes)]

    def tip_partials(self, codes: np.ndarray) -> np.ndarray:
        """Map ``(n_tips, n_characters)`` codes in {0, 1, -1} to ``(n_tips, n_characters, 2)``."""
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[0] != len(self.tip_labels):
            raise LikelihoodError("State codes must have one row per tree tip")
        partials = np.ones(codes.shape + (2,))
        partials[..., 0] = np.where(codes == 1, 0.0, 1.0)
        partials[..., 1] = np.where(codes == 0, 0.0, 1.0)
        return partials

    def loglik(self, partials: np.ndarray, s, p, grad: bool = False) -> PruningResult:
        n_chars = partials.shape[1]
        s = np.broadcast_to(np.asarray(s, dtype=float), (n_chars,))
        p = np.broadcast_to(np.asarray(p, dtype=float), (n_chars,))
        q = 1.0 - p
        log_scale = np.zeros(n_chars)
        zeros = np.zeros(n_chars)
        store: dict[int, tuple] = {}

        for node in self.order:
            kids = self._children[node]
            if not kids:
                tip = partials[self._slot[node]]
                store[node] = (tip[:, 0], tip[:, 1], zeros, zeros, zeros, zeros)
                continue
            acc = None
            for child in kids:
                edge = self._propagate(store.pop(child), s, p, q, self._lengths[child], grad)
                acc = edge if acc is None else self._combine(acc, edge, grad)
            l0, l1, d0s, d1s, d0p, d1p = acc
            scale = np.maximum(l0, l1)
            scale = np.where(scale > 0, scale, 1.0)
            log_scale += np.log(scale)
            if grad:
                store[node] = (l0 / scale, l1 / scale, d0s / scale, d1s / scale, d0p / scale, d1p / scale)
            else:
                store[node] = (l0 / scale, l1 / scale, None, None, None, None)

        r0, r1, d0s, d1s, d0p, d1p = store[self.tree.root]
        with np.errstate(divide="ignore", invalid="ignore"):
            lik = q * r0 + p * r1
            result = PruningResult(loglik=np.log(lik) + log_scale)
            if grad:
                result.d_s = (q * d0s + p * d1s) / lik
                result.d_p = (r1 - r0 + q * d0p + p * d1p) / lik
        return result

    @staticmethod
    def _propagate(partial: tuple, s, p, q, t: float, grad: bool) -> tuple:
        l0, l1, d0s, d1s, d0p, d1p = partial
        decay = np.exp(-s * t)
        moved = -np.expm1(-s * t)
        diff = l0 - l1
        v0 = l0 - p * moved * diff
        v1 = l1 + q * moved * diff
        if not grad:
            return (v0, v1, None, None, None, None)
        d_moved = t * decay
        diff_s = d0s - d1s
        diff_p = d0p - d1p
        v0s = d0s - p * (d_moved * diff + moved * diff_s)
        v1s = d1s + q * (d_moved * diff + moved * diff_s)
        v0p = d0p - moved * diff - p * moved * diff_p
        v1p = d1p - moved * diff + q * moved * diff_p
        return (v0, v1, v0s, v1s, v0p, v1p)

    @staticmethod
    def _combine(a: tuple, b: tuple, grad: bool) -> tuple:
        a0, a1, a0s, a1s, a0p, a1p = a
        b0, b1, b0s, b1s, b0p, b1p = b
        if not grad:
            return (a0 * b0, a1 * b1, None, None, None, None)
        return (
            a0 * b0,
            a1 * b1,
            a0s * b0 + a0 * b0s,
            a1s * b1 + a1 * b1s,
            a0p * b0 + a0 * b0p,
            a1p * b1 + a1 * b1p,
        )


def _single_character(tree: PhyloTree, tips: TipStates) -> tuple[CompiledTree, np.ndarray]:
    compiled = CompiledTree(tree)
    codes = np.array([[tips.code(label)] for label in compiled.tip_labels])
    return compiled, compiled.tip_partials(codes)


def log_likelihood(tree: PhyloTree, tips: TipStates, rp: RateParams) -> float:
    """Log-likelihood of one character; a tip whose state is None counts as missing."""
    compiled, partials = _single_character(tree, tips)
    return float(compiled.loglik(partials, rp.s, rp.p).loglik[0])


def log_likelihood_grad(tree: PhyloTree, tips: TipStates, rp: RateParams) -> tuple[float, float]:
    compiled, partials = _single_character(tree, tips)
    result = compiled.loglik(partials, rp.s, rp.p, grad=True)
    return float(result.d_s[0]), float(result.d_p[0])


def enumerate_likelihood_oracle(
    tree: PhyloTree,
    tips: TipStates,
    rp: RateParams,
    max_observed: int = 12,
    max_internal: int = 20,
) -> float:
    """Likelihood by summing over every joint assignment of internal-node states."""
    observed = {tip: tips.code(tree.label(tip)) for tip in tree.tips}  # type: ignore[arg-type]
    if sum(code != MISSING for code in observed.values()) > max_observed:
        raise LikelihoodError("Tree too large for enumeration")
    internal = [node for node in tree.preorder() if not tree.is_tip(node)]
    if len(internal) > max_internal:
        raise LikelihoodError("Tree too large for enumeration")
    pi = rp.stationary
    if not internal:
        state = observed[tree.root]
        return 1.0 if state == MISSING else pi[state]

    matrices = {node: transition_matrix(rp, tree.length(node)) for node in tree.preorder() if node != tree.root}
    total = 0.0
    for assignment in itertools.product((0, 1), repeat=len(internal)):
        state = dict(zip(internal, assignment))
        prob = pi[state[tree.root]]
        for node in tree.preorder():
            if node == tree.root:
                continue
            child_state = state.get(node, observed.get(node))
            if child_state == MISSING:
                continue
            prob *= matrices[node][state[tree.parent(node)], child_state]
        total += prob
    return total


def tip_codes(labels: Sequence[str], table: Mapping[str, Sequence[int]], n_chars: int) -> np.ndarray:
    """Stack per-taxon code rows in tree tip order; taxa without data are all missing."""
    rows = []
    for label in labels:
        row = table.get(label)
        rows.append(np.full(n_chars, MISSING) if row is None else np.asarray(row))
    return np.vstack(rows) if rows else np.empty((0, n_chars), dtype=int)
