from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .trees import PhyloTree

RootState = Union[int, str]


@dataclass(frozen=True)
class RateParams:
    s: float
    p: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.s) and self.s > 0):
            raise ValueError(f"Speed of change must be positive, got {self.s}")
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"Stationary probability must lie in (0, 1), got {self.p}")

    @property
    def stationary(self) -> tuple[float, float]:
        return (1.0 - self.p, self.p)


@dataclass(frozen=True)
class RateMatrix:
    q_gain: float
    q_loss: float

    @property
    def speed(self) -> float:
        return self.q_gain + self.q_loss

    @property
    def stationary_p(self) -> float:
        return self.q_gain / (self.q_gain + self.q_loss)

    def generator(self) -> np.ndarray:
        return np.array([[-self.q_gain, self.q_gain], [self.q_loss, -self.q_loss]])


def rates_from_params(rp: RateParams) -> RateMatrix:
    return RateMatrix(q_gain=rp.s * rp.p, q_loss=rp.s * (1.0 - rp.p))


def transition_matrix(rp: RateParams, t: float) -> np.ndarray:
    """Closed-form ``P(t)``; rows are the from-state, columns the to-state."""
    if t < 0:
        raise ValueError(f"Branch length must be non-negative, got {t}")
    # 1 - exp(-st) through expm1 keeps P01/P10 accurate for tiny st.
    decay = math.exp(-rp.s * t)
    moved = -math.expm1(-rp.s * t)
    p = rp.p
    return np.array(
        [
            [(1.0 - p) + p * decay, p * moved],
            [(1.0 - p) * moved, p + (1.0 - p) * decay],
        ]
    )


def _draw_root(p: float, root_state: RootState, rng: np.random.Generator) -> int:
    if root_state == "stationary":
        return int(rng.random() < p)
    if root_state in (0, 1):
        return int(root_state)
    raise ValueError(f"root_state must be 0, 1 or 'stationary', got {root_state!r}")


def _evolve(state: int, elapsed: float, q_gain: float, q_loss: float, rng: np.random.Generator) -> int:
    remaining = elapsed
    while True:
        rate = q_gain if state == 0 else q_loss
        wait = rng.exponential(1.0 / rate)
        if wait > remaining:
            return state
        remaining -= wait
        state = 1 - state


def simulate_node_states(
    tree: PhyloTree,
    rp: RateParams,
    root_state: RootState = "stationary",
    rng: Optional[np.random.Generator] = None,
) -> list[int]:
    rng = rng or np.random.default_rng()
    rates = rates_from_params(rp)
    states = [0] * tree.n_nodes
    for node in tree.preorder():
        parent = tree.parent(node)
        if parent == -1:
            states[node] = _draw_root(rp.p, root_state, rng)
        else:
            states[node] = _evolve(states[parent], tree.length(node), rates.q_gain, rates.q_loss, rng)
    return states


def simulate_history(
    tree: PhyloTree,
    rp: RateParams,
    root_state: RootState = "stationary",
    seed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> dict[str, int]:
    """Tip states of one character simulated down ``tree``, keyed by tip label."""
    rng = rng or np.random.default_rng(seed)
    states = simulate_node_states(tree, rp, root_state, rng)
    return {tree.label(tip): states[tip] for tip in tree.tips}  # type: ignore[misc]
