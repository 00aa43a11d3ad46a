"""Best-bound branch-and-bound with dual-bound accounting and an MDP view.

Time is measured in deterministic work units (simplex pivots plus one pricing
pass per LP solve, strong-branching probes included) unless the wall clock is
requested. Every node completion appends a ``(time, dual_bound)`` breakpoint to
the bound trace; the dual integral is the area between that step curve and the
root LP bound up to the horizon.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .featurize import BipartiteState, extract
from .instances import MilpInstance
from .policies import PseudocostHistory, update_pseudocost
from .simplex import LpSolution, LpStatus, SimplexOptions, solve_relaxation

__all__ = [
    "INT_TOL",
    "ContractViolation",
    "Limits",
    "BnbNode",
    "SolveReport",
    "BranchObs",
    "BranchAndBound",
    "BranchingEnv",
    "candidates",
    "branch",
    "solve",
    "dual_integral_score",
    "read_trace_csv",
]

INT_TOL = 1e-6
PRUNE_TOL = 1e-9


class ContractViolation(ValueError):
    """An action or argument outside the documented contract."""


@dataclass(frozen=True)
class Limits:
    max_work: float = math.inf
    max_nodes: float = math.inf
    clock: str = "work"  # "work" or "wall" (seconds)

    def __post_init__(self):
        if self.clock not in ("work", "wall"):
            raise ValueError(f"unknown clock {self.clock!r}")


@dataclass(eq=False)
class BnbNode:
    node_id: int
    parent_id: int | None
    bound_overrides: dict[int, tuple[float, float]]
    depth: int
    lp: LpSolution | None = None
    bound: float = -math.inf

    def var_bounds(self, instance: MilpInstance, j: int) -> tuple[float, float]:
        lo, up = instance.lower[j], instance.upper[j]
        if j in self.bound_overrides:
            olo, oup = self.bound_overrides[j]
            lo, up = max(lo, olo), min(up, oup)
        return float(lo), float(up)


def candidates(node: BnbNode, instance: MilpInstance, int_tol: float = INT_TOL) -> list[int]:
    """Integer variables with fractional LP value, ascending. Empty means integral."""
    x = node.lp.x
    frac = np.minimum(x - np.floor(x), np.ceil(x) - x)
    return np.flatnonzero(instance.integer_mask & (frac > int_tol)).tolist()


def branch(node: BnbNode, var: int, instance: MilpInstance,
           int_tol: float = INT_TOL) -> tuple[BnbNode, BnbNode]:
    """Split ``node`` on ``var`` into unsolved (down, up) children with ids unset (-1)."""
    if var not in candidates(node, instance, int_tol):
        raise ContractViolation(f"variable {var} is not a branching candidate")
    xv = node.lp.x[var]
    lo, up = node.var_bounds(instance, var)
    down = dict(node.bound_overrides)
    down[var] = (lo, float(math.floor(xv)))
    upper = dict(node.bound_overrides)
    upper[var] = (float(math.ceil(xv)), up)
    return (
        BnbNode(-1, node.node_id, down, node.depth + 1),
        BnbNode(-1, node.node_id, upper, node.depth + 1),
    )


def _check_trace(trace):
    if not trace:
        return
    arr = np.asarray(trace, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("trace must be a sequence of (time, bound) pairs")
    if not np.all(np.isfinite(arr)):
        raise ValueError("trace contains non-finite values")
    if np.any(np.diff(arr[:, 0]) < 0) or np.any(np.diff(arr[:, 1]) < 0):
        raise ValueError("trace must be nondecreasing in time and bound")


def _pieces(trace, start, stop, horizon, z_ref, extend):
    """Area pieces for breakpoints ``start..stop-1``; the last one runs to the
    next breakpoint, or to the horizon when ``extend`` is set."""
    out = []
    for k in range(start, stop):
        t, z = trace[k]
        if k + 1 < len(trace) and not (extend and k + 1 == stop):
            t_next = trace[k + 1][0]
        else:
            t_next = horizon
        a, b = min(t, horizon), min(t_next, horizon)
        if b > a:
            out.append((z - z_ref) * (b - a))
    return out


def dual_integral_score(trace: Sequence[tuple[float, float]], horizon: float,
                        z_ref: float) -> float:
    """Area between the step dual-bound curve and ``z_ref`` over ``[t_0, horizon]``.

    The curve is right-continuous and extended flat past its last breakpoint;
    breakpoints beyond the horizon are ignored. Larger is better.
    """
    _check_trace(trace)
    if not trace:
        return 0.0
    return math.fsum(_pieces(trace, 0, len(trace), horizon, z_ref, extend=True))


@dataclass
class SolveReport:
    status: str
    incumbent: np.ndarray | None
    primal_value: float
    final_dual_bound: float
    node_count: int
    total_work: int
    bound_trace: list[tuple[float, float]]
    root_bound: float
    horizon: float
    dual_integral: float
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        def num(v):
            return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")

        return {
            "status": self.status,
            "incumbent": None if self.incumbent is None else [float(v) + 0.0 for v in self.incumbent],
            "primal_value": num(self.primal_value),
            "final_dual_bound": num(self.final_dual_bound),
            "node_count": self.node_count,
            "total_work": self.total_work,
            "root_bound": num(self.root_bound),
            "horizon": num(self.horizon),
            "dual_integral": self.dual_integral,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["work_time", "dual_bound"])
        for t, z in self.bound_trace:
            writer.writerow([repr(float(t)), repr(float(z))])
        return buf.getvalue()


def read_trace_csv(text: str) -> list[tuple[float, float]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["work_time", "dual_bound"]:
        raise ValueError("missing trace header")
    return [(float(t), float(z)) for t, z in rows[1:]]


class BranchAndBound:
    """Stateful best-bound search that pauses at every branching decision.

    Call :meth:`start`, then :meth:`branch_on` with a candidate of the
    returned node until it returns ``None``; :meth:`report` summarizes.
    """

    def __init__(self, instance: MilpInstance, limits: Limits | None = None,
                 simplex_options: SimplexOptions | None = None, int_tol: float = INT_TOL):
        self.instance = instance
        self.limits = limits or Limits()
        self.simplex_options = simplex_options
        self.int_tol = int_tol
        self.pseudocosts = PseudocostHistory(instance.n_vars)
        self.work = 0
        self.node_count = 0
        self.incumbent: np.ndarray | None = None
        self.incumbent_value = math.inf
        self.trace: list[tuple[float, float]] = []
        self.root_bound = math.nan
        self.status = "running"
        self.current: BnbNode | None = None
        self.current_candidates: list[int] = []
        self._queue: list[tuple[float, int, BnbNode]] = []
        self._next_id = 0
        self._t0 = time.perf_counter()
        self._last_bound = -math.inf

    # -- clock ---------------------------------------------------------
    @property
    def time(self) -> float:
        if self.limits.clock == "wall":
            return time.perf_counter() - self._t0
        return float(self.work)

    @property
    def horizon(self) -> float:
        if math.isfinite(self.limits.max_work):
            return float(self.limits.max_work)
        return self.trace[-1][0] if self.trace else 0.0

    def solve_lp(self, overrides: dict) -> LpSolution:
        """Solve a relaxation under ``overrides`` and charge its work."""
        lp = solve_relaxation(self.instance, overrides, self.simplex_options)
        if lp.status is LpStatus.ITERATION_LIMIT:
            # retry once under Bland's rule with a generous cap
            base = self.simplex_options or SimplexOptions()
            n = self.instance.n_vars + self.instance.n_cons
            retry = SimplexOptions(
                tol_feas=base.tol_feas, tol_opt=base.tol_opt, tol_obj=base.tol_obj,
                tol_pivot=base.tol_pivot, max_iter=1000 * n, bland_after=0,
                refactor_every=base.refactor_every,
            )
            self.work += lp.work
            lp = solve_relaxation(self.instance, overrides, retry)
            if lp.status is LpStatus.ITERATION_LIMIT:
                raise RuntimeError("LP relaxation did not converge")
        self.work += lp.work
        return lp

    # -- bookkeeping -------------------------------------------------------
    def dual_bound(self) -> float:
        bound = self.incumbent_value
        if self._queue:
            bound = min(bound, self._queue[0][0])
        if self.current is not None:
            bound = min(bound, self.current.bound)
        return bound

    def _record(self):
        z = max(self.dual_bound(), self._last_bound)
        if not math.isfinite(z):
            return  # exhausted without incumbent: the curve stops
        self._last_bound = z
        t = self.time
        if self.trace and t < self.trace[-1][0]:
            t = self.trace[-1][0]
        self.trace.append((t, z))

    def _register(self, node: BnbNode) -> BnbNode:
        node.node_id = self._next_id
        self._next_id += 1
        return node

    def _evaluate(self, node: BnbNode, parent_bound: float) -> None:
        """Solve ``node`` and prune, accept as incumbent, or enqueue it."""
        node.lp = self.solve_lp(node.bound_overrides)
        self.node_count += 1
        if node.lp.status is LpStatus.INFEASIBLE:
            return
        if node.lp.status is LpStatus.UNBOUNDED:
            raise ValueError("unbounded LP relaxation is not supported")
        node.bound = max(node.lp.obj_value, parent_bound)
        if not candidates(node, self.instance, self.int_tol):
            if node.lp.obj_value < self.incumbent_value:
                x = node.lp.x.copy()
                mask = self.instance.integer_mask
                x[mask] = np.round(x[mask])
                self.incumbent, self.incumbent_value = x, node.lp.obj_value
            return
        if node.bound >= self.incumbent_value - PRUNE_TOL:
            return
        heapq.heappush(self._queue, (node.bound, node.node_id, node))

    def _limit_hit(self) -> bool:
        return self.node_count >= self.limits.max_nodes or self.time >= self.limits.max_work

    def _advance(self) -> BnbNode | None:
        while self._queue:
            bound, _, node = self._queue[0]
            if bound >= self.incumbent_value - PRUNE_TOL:
                # best-bound order: everything left is dominated
                self._queue.clear()
                break
            if self._limit_hit():
                self.status = "limit"
                return None
            heapq.heappop(self._queue)
            self.current = node
            self.current_candidates = candidates(node, self.instance, self.int_tol)
            return node
        self.status = "optimal" if self.incumbent is not None else "infeasible"
        self._record()
        return None

    # -- driving -----------------------------------------------------------
    def start(self) -> BnbNode | None:
        root = self._register(BnbNode(0, None, {}, 0))
        self._evaluate(root, -math.inf)
        if root.lp.status is LpStatus.INFEASIBLE:
            self.status = "infeasible"
            return None
        self.root_bound = root.lp.obj_value
        self._last_bound = self.root_bound
        self.trace.append((self.time, self.root_bound))
        return self._advance()

    def branch_on(self, var: int) -> BnbNode | None:
        node = self.current
        if node is None:
            raise ContractViolation("no node is awaiting a branching decision")
        if var not in self.current_candidates:
            raise ContractViolation(f"variable {var} is not a branching candidate")
        down, up = branch(node, var, self.instance, self.int_tol)
        xv = node.lp.x[var]
        for child, direction, frac in ((down, "down", xv - math.floor(xv)),
                                       (up, "up", math.ceil(xv) - xv)):
            self._register(child)
            self._evaluate(child, node.bound)
            if child.lp.status is LpStatus.OPTIMAL:
                update_pseudocost(self.pseudocosts, var, direction,
                                  child.lp.obj_value - node.lp.obj_value, frac)
        self.current = None
        self.current_candidates = []
        self._record()
        return self._advance()

    def report(self) -> SolveReport:
        horizon = self.horizon
        z_ref = self.root_bound if math.isfinite(self.root_bound) else 0.0
        status = self.status if self.status != "running" else "limit"
        if status == "optimal":
            final = self.incumbent_value
        elif self.trace:
            final = self.trace[-1][1]
            if status == "infeasible":
                final = math.inf
        else:
            final = math.inf if status == "infeasible" else -math.inf
        return SolveReport(
            status=status,
            incumbent=None if self.incumbent is None else self.incumbent.copy(),
            primal_value=self.incumbent_value,
            final_dual_bound=final,
            node_count=self.node_count,
            total_work=self.work,
            bound_trace=list(self.trace),
            root_bound=self.root_bound,
            horizon=horizon,
            dual_integral=dual_integral_score(self.trace, horizon, z_ref),
            wall_time=time.perf_counter() - self._t0,
        )


Policy = Callable[[BranchAndBound, BnbNode, Sequence[int]], int]


def solve(instance: MilpInstance, policy: Policy, limits: Limits | None = None,
          simplex_options: SimplexOptions | None = None) -> SolveReport:
    """Run branch-and-bound to completion (or the limits) with ``policy``."""
    tree = BranchAndBound(instance, limits, simplex_options)
    node = tree.start()
    while node is not None:
        node = tree.branch_on(policy(tree, node, tree.current_candidates))
    return tree.report()


@dataclass(frozen=True, eq=False)
class BranchObs:
    state: BipartiteState
    candidates: list[int]
    node: BnbNode


@dataclass
class BranchingEnv:
    """Episodic environment over one instance at a time.

    Rewards are the dual integral accrued between consecutive decisions, so
    an episode's return equals :func:`dual_integral_score` of its trace.
    """

    limits: Limits = field(default_factory=Limits)
    simplex_options: SimplexOptions | None = None

    def __post_init__(self):
        self.tree: BranchAndBound | None = None
        self._pos = 0
        self.done = True

    def _observe(self, node: BnbNode) -> BranchObs:
        cands = list(self.tree.current_candidates)
        state = extract(node, self.tree.instance, cands)
        return BranchObs(state, cands, node)

    def reset(self, instance: MilpInstance, limits: Limits | None = None) -> BranchObs | SolveReport:
        if limits is not None:
            self.limits = limits
        self.tree = BranchAndBound(instance, self.limits, self.simplex_options)
        node = self.tree.start()
        self._pos = len(self.tree.trace) - 1
        if node is None:
            self.done = True
            return self.tree.report()
        self.done = False
        return self._observe(node)

    @property
    def z_ref(self) -> float:
        return self.tree.root_bound

    def step(self, action: int) -> tuple[BranchObs | SolveReport, float, bool]:
        if self.done or self.tree is None:
            raise ContractViolation("step() called on a finished episode; call reset()")
        if action not in self.tree.current_candidates:
            raise ContractViolation(f"action {action} is not in the candidate set")
        tree = self.tree
        node = tree.branch_on(action)
        trace = tree.trace
        if node is None:
            pieces = _pieces(trace, self._pos, len(trace), tree.horizon, tree.root_bound, True)
            self.done = True
            return tree.report(), math.fsum(pieces), True
        new_pos = len(trace) - 1
        pieces = _pieces(trace, self._pos, new_pos, tree.horizon, tree.root_bound, False)
        self._pos = new_pos
        return self._observe(node), math.fsum(pieces), False
