"""Bounded-variable primal simplex for LP relaxations.

The solver works on ``A x + s = b`` with slacks ``s >= 0`` and keeps a dense
tableau ``B^-1 [A I]``. Nonbasic variables sit at a finite bound (or at zero
when free). Phase 1 minimizes the sum of bound infeasibilities of the basic
variables; phase 2 minimizes ``c @ x``. Pricing is Dantzig's rule and switches
to Bland's rule for the rest of the solve after a run of degenerate pivots.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from .instances import MilpInstance

__all__ = [
    "LpStatus",
    "LpSolution",
    "SimplexOptions",
    "BASIC",
    "AT_LOWER",
    "AT_UPPER",
    "FREE",
    "merged_bounds",
    "solve_lp",
    "solve_relaxation",
]

BASIC, AT_LOWER, AT_UPPER, FREE = 0, 1, 2, 3


class LpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration-limit"


@dataclass(frozen=True)
class SimplexOptions:
    tol_feas: float = 1e-7
    tol_opt: float = 1e-7
    tol_obj: float = 1e-6
    tol_pivot: float = 1e-9
    max_iter: int | None = None  # None means 50 * (n + m)
    bland_after: int = 25  # consecutive degenerate pivots before Bland's rule
    refactor_every: int = 50


@dataclass(frozen=True, eq=False)
class LpSolution:
    """Result of one LP solve.

    ``duals`` follow the Lagrangian sign convention for ``A x <= b`` rows, so
    they are nonnegative at optimality. ``basis`` holds one status code per
    structural variable followed by one per row slack.
    """

    status: LpStatus
    x: np.ndarray
    obj_value: float
    duals: np.ndarray
    reduced_costs: np.ndarray
    iterations: int
    basis: np.ndarray

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL

    @property
    def work(self) -> int:
        """Work units charged for this solve: pivots plus the final pricing pass."""
        return self.iterations + 1


def merged_bounds(instance: MilpInstance,
                  bound_overrides: Mapping[int, tuple[float, float]] | None = None):
    lower = instance.lower.copy()
    upper = instance.upper.copy()
    if bound_overrides:
        for j, (lo, up) in bound_overrides.items():
            lower[j] = max(lower[j], lo)
            upper[j] = min(upper[j], up)
    return lower, upper


def solve_relaxation(instance: MilpInstance,
                     bound_overrides: Mapping[int, tuple[float, float]] | None = None,
                     options: SimplexOptions | None = None) -> LpSolution:
    """Solve the LP relaxation of ``instance`` under tightened variable bounds."""
    lower, upper = merged_bounds(instance, bound_overrides)
    return solve_lp(instance.obj, _dense(instance), instance.rhs, lower, upper, options)


def _dense(instance: MilpInstance) -> np.ndarray:
    # instances are immutable, so the dense matrix is cached on the object
    A = instance.__dict__.get("_dense_cache")
    if A is None:
        A = instance.dense()
        A.setflags(write=False)
        instance.__dict__["_dense_cache"] = A
    return A


def solve_lp(c, A, b, lower, upper, options: SimplexOptions | None = None) -> LpSolution:
    """Solve ``min c@x  s.t.  A@x <= b,  lower <= x <= upper``."""
    opts = options or SimplexOptions()
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, len(c))
    b = np.asarray(b, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n, m = len(c), len(b)
    if np.any(lower > upper):
        return LpSolution(
            LpStatus.INFEASIBLE, np.clip(np.zeros(n), lower, upper), np.inf,
            np.zeros(m), np.zeros(n), 0, np.full(n + m, AT_LOWER, dtype=np.int8),
        )
    return _Tableau(c, A, b, lower, upper, opts).run()


class _Tableau:
    def __init__(self, c, A, b, lower, upper, opts: SimplexOptions):
        n, m = len(c), len(b)
        self.n, self.m, self.opts = n, m, opts
        self.M = np.hstack([A, np.eye(m)])
        self.b = b
        self.cost = np.concatenate([c, np.zeros(m)])
        self.lo = np.concatenate([lower, np.zeros(m)])
        self.hi = np.concatenate([upper, np.full(m, np.inf)])
        self.lo_fin = np.isfinite(self.lo)
        self.hi_fin = np.isfinite(self.hi)
        self.fixed = self.lo_fin & self.hi_fin & (self.hi - self.lo <= opts.tol_feas)

        self.state = np.empty(n + m, dtype=np.int8)
        self.x = np.zeros(n + m)
        for j in range(n):
            if self.lo_fin[j]:
                self.state[j], self.x[j] = AT_LOWER, self.lo[j]
            elif self.hi_fin[j]:
                self.state[j], self.x[j] = AT_UPPER, self.hi[j]
            else:
                self.state[j], self.x[j] = FREE, 0.0
        self.state[n:] = BASIC
        self.head = np.arange(n, n + m)
        self.T = self.M.copy()
        self.iterations = 0
        self.max_iter = opts.max_iter if opts.max_iter is not None else 50 * (n + m)

    def _basic_values(self):
        xn = self.x.copy()
        xn[self.head] = 0.0
        self.x[self.head] = self.T[:, self.n:] @ self.b - self.T @ xn

    def _refactor(self):
        B = self.M[:, self.head]
        self.T = np.linalg.solve(B, self.M)

    def _pivot(self, r, q):
        T = self.T
        T[r] /= T[r, q]
        col = T[:, q].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r])
        T[:, q] = 0.0
        T[r, q] = 1.0

    def _reduced_costs(self, cost):
        y = cost[self.head] @ self.T[:, self.n:]
        d = cost - y @ self.M
        d[self.head] = 0.0
        return y, d

    def run(self) -> LpSolution:
        opts = self.opts
        tol_f, tol_o, tol_p = opts.tol_feas, opts.tol_opt, opts.tol_pivot
        bland = False
        degenerate_run = 0
        since_refactor = 0
        head = self.head
        while True:
            self._basic_values()
            xb = self.x[head]
            lob, hib = self.lo[head], self.hi[head]
            below = xb < lob - tol_f
            above = xb > hib + tol_f
            phase1 = bool(below.any() or above.any())
            if phase1:
                cost = np.zeros(self.n + self.m)
                cost[head[below]] = -1.0
                cost[head[above]] = 1.0
            else:
                cost = self.cost
            _, d = self._reduced_costs(cost)

            st = self.state
            movable = ~self.fixed
            up_ok = movable & (((st == AT_LOWER) | (st == FREE)) & (d < -tol_o))
            down_ok = movable & (((st == AT_UPPER) | (st == FREE)) & (d > tol_o))
            eligible = up_ok | down_ok
            if not eligible.any():
                if phase1:
                    return self._finish(LpStatus.INFEASIBLE)
                return self._finish(LpStatus.OPTIMAL)
            if self.iterations >= self.max_iter:
                return self._finish(LpStatus.ITERATION_LIMIT)

            if bland:
                q = int(np.flatnonzero(eligible)[0])
            else:
                q = int(np.argmax(np.where(eligible, np.abs(d), -1.0)))
            direction = 1.0 if up_ok[q] else -1.0

            alpha = direction * self.T[:, q]
            ratio = np.full(self.m, np.inf)
            leave_at = np.zeros(self.m, dtype=np.int8)
            dec = alpha > tol_p   # basic value decreases along the ray
            inc = alpha < -tol_p  # basic value increases
            feas = ~(below | above)

            sel = dec & above
            ratio[sel] = (xb[sel] - hib[sel]) / alpha[sel]
            leave_at[sel] = AT_UPPER
            sel = dec & feas & np.isfinite(lob)
            ratio[sel] = (xb[sel] - lob[sel]) / alpha[sel]
            leave_at[sel] = AT_LOWER
            sel = inc & below
            ratio[sel] = (lob[sel] - xb[sel]) / -alpha[sel]
            leave_at[sel] = AT_LOWER
            sel = inc & feas & np.isfinite(hib)
            ratio[sel] = (hib[sel] - xb[sel]) / -alpha[sel]
            leave_at[sel] = AT_UPPER
            np.maximum(ratio, 0.0, out=ratio)

            flip = self.hi[q] - self.lo[q] if (self.lo_fin[q] and self.hi_fin[q]) else np.inf
            t_row = ratio.min() if self.m else np.inf
            if not np.isfinite(t_row) and not np.isfinite(flip):
                if phase1:
                    # the phase-1 objective is bounded below; a ray means numerical trouble
                    return self._finish(LpStatus.ITERATION_LIMIT)
                return self._finish(LpStatus.UNBOUNDED)

            self.iterations += 1
            if flip <= t_row:
                step = flip
                if self.state[q] == AT_LOWER:
                    self.state[q], self.x[q] = AT_UPPER, self.hi[q]
                else:
                    self.state[q], self.x[q] = AT_LOWER, self.lo[q]
            else:
                step = t_row
                ties = np.flatnonzero(ratio <= t_row + 1e-12)
                if bland:
                    r = int(ties[np.argmin(head[ties])])
                else:
                    r = int(ties[np.argmax(np.abs(alpha[ties]))])
                out = head[r]
                self.state[out] = leave_at[r]
                self.x[out] = self.lo[out] if leave_at[r] == AT_LOWER else self.hi[out]
                self.x[q] += direction * step
                self._pivot(r, q)
                head[r] = q
                self.state[q] = BASIC
                since_refactor += 1
                if since_refactor >= opts.refactor_every:
                    self._refactor()
                    since_refactor = 0

            if step <= 1e-12:
                degenerate_run += 1
                if degenerate_run >= opts.bland_after:
                    bland = True
            else:
                degenerate_run = 0

    def _finish(self, status: LpStatus) -> LpSolution:
        n = self.n
        y, d = self._reduced_costs(self.cost)
        x = self.x[:n].copy()
        obj = float(self.cost[:n] @ x)
        if status is LpStatus.INFEASIBLE:
            obj = np.inf
        elif status is LpStatus.UNBOUNDED:
            obj = -np.inf
        basis = self.state.copy()
        return LpSolution(status, x, obj, -y, d[:n].copy(), self.iterations, basis)
