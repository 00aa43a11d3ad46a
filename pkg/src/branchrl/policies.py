"""Classical branching rules used as baselines and as demonstration experts.

A branching policy is any callable ``policy(tree, node, candidates) -> var``
where ``tree`` is the running :class:`~branchrl.engine.BranchAndBound`.
Strong branching probes child LPs through ``tree.solve_lp`` so their work is
charged to the solving clock.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .simplex import LpSolution, LpStatus, solve_relaxation

if TYPE_CHECKING:
    from .engine import BnbNode, BranchAndBound
    from .instances import MilpInstance

__all__ = [
    "BIG",
    "SCORE_EPS",
    "PseudocostHistory",
    "product_score",
    "strong_branching_scores",
    "pseudocost_scores",
    "update_pseudocost",
    "most_infeasible_pick",
    "random_pick",
    "StrongBranching",
    "PseudocostBranching",
    "MostInfeasible",
    "RandomBranching",
    "make_policy",
]

BIG = 1e10
SCORE_EPS = 1e-6


def product_score(down_gain, up_gain, eps: float = SCORE_EPS):
    return np.maximum(down_gain, eps) * np.maximum(up_gain, eps)


@dataclass
class PseudocostHistory:
    """Per-variable sums and counts of unit objective gains.

    Variables never branched on in a direction report the default of 1.0.
    """

    n_vars: int
    default: float = 1.0
    up_sum: np.ndarray = field(init=False)
    up_count: np.ndarray = field(init=False)
    down_sum: np.ndarray = field(init=False)
    down_count: np.ndarray = field(init=False)

    def __post_init__(self):
        self.up_sum = np.zeros(self.n_vars)
        self.up_count = np.zeros(self.n_vars, dtype=np.int64)
        self.down_sum = np.zeros(self.n_vars)
        self.down_count = np.zeros(self.n_vars, dtype=np.int64)

    def psi_up(self, j=slice(None)):
        cnt = self.up_count[j]
        return np.where(cnt > 0, self.up_sum[j] / np.maximum(cnt, 1), self.default)

    def psi_down(self, j=slice(None)):
        cnt = self.down_count[j]
        return np.where(cnt > 0, self.down_sum[j] / np.maximum(cnt, 1), self.default)


def update_pseudocost(history: PseudocostHistory, var: int, direction: str,
                      objective_gain: float, fractionality: float) -> None:
    """Record one branching outcome; ``direction`` is ``"up"`` or ``"down"``."""
    if fractionality <= 0:
        raise ValueError("fractionality must be positive")
    unit = max(objective_gain, 0.0) / fractionality
    if direction == "up":
        history.up_sum[var] += unit
        history.up_count[var] += 1
    elif direction == "down":
        history.down_sum[var] += unit
        history.down_count[var] += 1
    else:
        raise ValueError(f"unknown direction {direction!r}")


def pseudocost_scores(history: PseudocostHistory, lp: LpSolution,
                      candidates: Sequence[int]) -> np.ndarray:
    idx = np.asarray(candidates, dtype=np.int64)
    x = lp.x[idx]
    down_frac = x - np.floor(x)
    up_frac = np.ceil(x) - x
    return product_score(down_frac * history.psi_down(idx), up_frac * history.psi_up(idx))


def _child_gain(child: LpSolution, parent_obj: float) -> float:
    if child.status is LpStatus.INFEASIBLE:
        return BIG
    if child.status is not LpStatus.OPTIMAL:
        return 0.0  # iteration limit: degraded entry
    return max(child.obj_value - parent_obj, 0.0)


def strong_branching_scores(instance: MilpInstance, node: BnbNode, candidates: Sequence[int],
                            solve: Callable[[dict], LpSolution] | None = None) -> np.ndarray:
    """Product-rule strong branching scores.

    ``solve`` maps a bound-override dict to an :class:`LpSolution`; the engine
    passes a solver that charges work to its clock.
    """
    if solve is None:
        def solve(overrides):
            return solve_relaxation(instance, overrides)
    lp = node.lp
    scores = np.empty(len(candidates))
    for k, j in enumerate(candidates):
        lo, up = node.var_bounds(instance, j)
        xj = lp.x[j]
        down = dict(node.bound_overrides)
        down[j] = (lo, math.floor(xj))
        upc = dict(node.bound_overrides)
        upc[j] = (math.ceil(xj), up)
        gd = _child_gain(solve(down), lp.obj_value)
        gu = _child_gain(solve(upc), lp.obj_value)
        scores[k] = product_score(gd, gu)
    return scores


def most_infeasible_pick(lp: LpSolution, candidates: Sequence[int]) -> int:
    """Candidate whose LP value is closest to a half-integer (lowest index on ties)."""
    idx = np.asarray(candidates, dtype=np.int64)
    x = lp.x[idx]
    dist = np.abs(x - np.floor(x) - 0.5)
    return int(idx[dist == dist.min()].min())


def random_pick(candidates: Sequence[int], rng: np.random.Generator) -> int:
    return int(candidates[rng.integers(len(candidates))])


def _argmax_first(scores, candidates) -> int:
    return int(candidates[int(np.argmax(scores))])


class StrongBranching:
    name = "sb"

    def __call__(self, tree: BranchAndBound, node: BnbNode, candidates: Sequence[int]) -> int:
        scores = strong_branching_scores(tree.instance, node, candidates, tree.solve_lp)
        return _argmax_first(scores, candidates)


class PseudocostBranching:
    name = "pc"

    def __call__(self, tree, node, candidates):
        return _argmax_first(pseudocost_scores(tree.pseudocosts, node.lp, candidates), candidates)


class MostInfeasible:
    name = "mostinf"

    def __call__(self, tree, node, candidates):
        return most_infeasible_pick(node.lp, candidates)


class RandomBranching:
    """Uniform choice, seeded per node so results do not depend on call order."""

    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, tree, node, candidates):
        rng = np.random.default_rng([self.seed, node.node_id])
        return random_pick(candidates, rng)


def make_policy(name: str, seed: int = 0):
    """Build a policy from its CLI name; ``learned:<path>`` loads a checkpoint."""
    if name == "sb":
        return StrongBranching()
    if name == "pc":
        return PseudocostBranching()
    if name == "mostinf":
        return MostInfeasible()
    if name == "random":
        return RandomBranching(seed)
    if name.startswith("learned:"):
        from .qnet import load_params
        from .trainer import GreedyQPolicy

        return GreedyQPolicy(load_params(name.split(":", 1)[1]))
    raise ValueError(f"unknown policy {name!r}")
