"""Random test-data builders shared across test modules."""

import numpy as np

from branchrl.featurize import BipartiteState
from branchrl.instances import MilpInstance
from branchrl.replay import Transition


def random_lp(rng, m, n, feasible_bias=0.7):
    """Random bounded LP with finite lower bounds.

    With probability ``feasible_bias`` the right-hand side is built around a
    point inside the bounds, so most draws are feasible; the rest use a raw
    random right-hand side and are often infeasible.
    """
    c = rng.normal(size=n)
    A = rng.normal(size=(m, n)) * (rng.random((m, n)) < 0.7)
    lower = rng.integers(-3, 1, size=n).astype(float)
    upper = lower + rng.integers(1, 6, size=n)
    upper[rng.random(n) < 0.25] = np.inf
    if rng.random() < feasible_bias:
        x0 = lower + rng.random(n) * np.minimum(upper - lower, 3.0)
        b = A @ x0 + rng.random(m)
    else:
        b = rng.normal(size=m)
    return c, A, b, lower, upper


def random_binary_instance(rng, n, m):
    """Small pure-binary MILP with mixed-sign rows (may be infeasible)."""
    c = rng.integers(-10, 11, size=n).astype(float)
    A = rng.integers(-5, 6, size=(m, n)) * (rng.random((m, n)) < 0.6)
    b = np.floor(A.clip(min=0).sum(axis=1) * rng.uniform(0.2, 0.8, size=m))
    return MilpInstance.from_dense(c, A, b, np.zeros(n), np.ones(n), np.ones(n, bool))


def random_state(rng, n, m, scale=1.0):
    """A random bipartite state with at least one candidate."""
    k = int(rng.integers(0, n * m + 1))
    pairs = rng.choice(n * m, size=k, replace=False) if k else np.zeros(0, dtype=np.int64)
    pairs = np.sort(pairs)
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)] = True
    return BipartiteState(
        cons_feats=rng.normal(size=(m, 4)) * scale,
        var_feats=rng.normal(size=(n, 8)) * scale,
        edge_cons=(pairs // n).astype(np.int64),
        edge_vars=(pairs % n).astype(np.int64),
        edge_feats=rng.normal(size=(len(pairs), 1)) * scale,
        candidate_mask=mask,
    )


def random_transitions(rng, count, n_terminal=1, max_vars=4, max_cons=3):
    """``count`` transitions over random states; the first ``n_terminal`` are terminal."""
    out = []
    for k in range(count):
        s = random_state(rng, int(rng.integers(1, max_vars + 1)), int(rng.integers(1, max_cons + 1)))
        a = int(rng.choice(s.candidates))
        r = float(rng.normal())
        if k < n_terminal:
            out.append(Transition(s, a, r, None, (), True))
        else:
            s2 = random_state(rng, int(rng.integers(1, max_vars + 1)), int(rng.integers(1, max_cons + 1)))
            out.append(Transition(s, a, r, s2, tuple(int(j) for j in s2.candidates), False))
    return out


def fractional_root(make, start=0, tries=200):
    """First ``make(seed)`` instance, seed >= start, whose root LP is fractional."""
    from branchrl.engine import BranchAndBound

    for seed in range(start, start + tries):
        inst = make(seed)
        if BranchAndBound(inst).start() is not None:
            return inst
    raise RuntimeError("no instance with a fractional root found")
