"""Bipartite constraint/variable graph observation of a solved B&B node."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .simplex import merged_bounds

if TYPE_CHECKING:
    from .engine import BnbNode
    from .instances import MilpInstance

__all__ = ["BipartiteState", "extract", "VAR_FEATS", "CONS_FEATS", "EDGE_FEATS"]

VAR_FEATS = (
    "obj_coef", "lp_value", "fractionality", "is_integer",
    "at_lower", "at_upper", "has_lower", "has_upper",
)
CONS_FEATS = ("rhs", "slack", "is_tight", "dual_sign")
EDGE_FEATS = ("coef",)

_TIGHT = 1e-6


@dataclass(frozen=True, eq=False)
class BipartiteState:
    """Graph state: ``cons_feats`` (m x 4), ``var_feats`` (n x 8), and one
    edge per nonzero ``A[i, j]`` with ``edge_feats`` (nnz x 1)."""

    cons_feats: np.ndarray
    var_feats: np.ndarray
    edge_cons: np.ndarray
    edge_vars: np.ndarray
    edge_feats: np.ndarray
    candidate_mask: np.ndarray

    @property
    def n_vars(self) -> int:
        return self.var_feats.shape[0]

    @property
    def n_cons(self) -> int:
        return self.cons_feats.shape[0]

    @property
    def candidates(self) -> np.ndarray:
        return np.flatnonzero(self.candidate_mask)


def extract(node: BnbNode, instance: MilpInstance,
            candidates: Sequence[int] | None = None) -> BipartiteState:
    lp = node.lp
    x = lp.x
    n, m = instance.n_vars, instance.n_cons
    lower, upper = merged_bounds(instance, node.bound_overrides)

    c = instance.obj
    cmax = np.abs(c).max() if n else 0.0
    V = np.zeros((n, len(VAR_FEATS)))
    V[:, 0] = c / cmax if cmax > 0 else 0.0
    xscale = max(1.0, np.abs(x).max()) if n else 1.0
    V[:, 1] = np.clip(x / xscale, -1.0, 1.0)
    frac = np.minimum(x - np.floor(x), np.ceil(x) - x)
    V[:, 2] = np.where(instance.integer_mask, frac, 0.0)
    V[:, 3] = instance.integer_mask
    has_lo, has_up = np.isfinite(lower), np.isfinite(upper)
    V[:, 4] = has_lo & (np.abs(x - np.where(has_lo, lower, 0.0)) <= _TIGHT)
    V[:, 5] = has_up & (np.abs(x - np.where(has_up, upper, 0.0)) <= _TIGHT)
    V[:, 6] = has_lo
    V[:, 7] = has_up

    rows, cols, vals = instance.rows, instance.cols, instance.vals
    row_norm = np.sqrt(np.bincount(rows, weights=vals * vals, minlength=m))
    activity = np.bincount(rows, weights=vals * x[cols], minlength=m)
    b = instance.rhs
    slack = b - activity
    C = np.zeros((m, len(CONS_FEATS)))
    C[:, 0] = b / np.maximum(1.0, row_norm)
    C[:, 1] = np.clip(slack / np.maximum(1.0, np.abs(b)), -1.0, 1.0)
    C[:, 2] = np.abs(slack) <= _TIGHT
    C[:, 3] = np.where(np.abs(lp.duals) > _TIGHT, np.sign(lp.duals), 0.0)

    safe = np.where(row_norm > 0, row_norm, 1.0)
    E = (vals / safe[rows]).reshape(-1, 1)

    mask = np.zeros(n, dtype=bool)
    if candidates is not None:
        mask[np.asarray(candidates, dtype=np.int64)] = True
    return BipartiteState(C, V, rows.copy(), cols.copy(), E, mask)
