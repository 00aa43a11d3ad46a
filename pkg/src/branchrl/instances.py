"""MILP data model, desk-scale instance generators and a text format.

All instances are minimization problems of the form::

    min  c @ x
    s.t. A @ x <= b
         lower <= x <= upper
         x[j] integral where integer_mask[j]

Text format
-----------
UTF-8, one section keyword per line, blank lines and ``#`` comments ignored::

    VARS <n>
    CONS <m>
    OBJ
    <c_0> <c_1> ... <c_{n-1}>
    MAT
    <i> <j> <coef>            # one nonzero per line, any number of lines
    RHS
    <b_0> ... <b_{m-1}>
    BOUNDS
    <l_0> <u_0>               # exactly n lines; -inf / inf allowed
    ...
    INT
    <j> <j'> ...              # integer variable indices, may be empty
    END

Floats are written with ``repr`` so reading back is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "MilpInstance",
    "Violation",
    "InstanceParseError",
    "validate",
    "generate_set_cover",
    "generate_knapsack_like",
    "write_instance",
    "read_instance",
]


class Violation(NamedTuple):
    kind: str
    message: str


class InstanceParseError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MilpInstance:
    """Immutable minimization MILP with a sparse row-major constraint matrix.

    The matrix is stored as coordinate triples (``rows``, ``cols``, ``vals``)
    sorted by ``(row, col)``. Construction does not validate; call
    :func:`validate` for that.
    """

    obj: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    integer_mask: np.ndarray

    def __post_init__(self):
        obj = _frozen(self.obj, float).reshape(-1)
        rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        vals = np.asarray(self.vals, dtype=float).reshape(-1)
        if not (len(rows) == len(cols) == len(vals)):
            raise ValueError("rows, cols and vals must have equal length")
        order = np.lexsort((cols, rows))
        object.__setattr__(self, "obj", obj)
        object.__setattr__(self, "rows", _frozen(rows[order], np.int64))
        object.__setattr__(self, "cols", _frozen(cols[order], np.int64))
        object.__setattr__(self, "vals", _frozen(vals[order], float))
        object.__setattr__(self, "rhs", _frozen(self.rhs, float).reshape(-1))
        object.__setattr__(self, "lower", _frozen(self.lower, float).reshape(-1))
        object.__setattr__(self, "upper", _frozen(self.upper, float).reshape(-1))
        object.__setattr__(self, "integer_mask", _frozen(self.integer_mask, bool).reshape(-1))
        n = len(obj)
        if not (len(self.lower) == len(self.upper) == len(self.integer_mask) == n):
            raise ValueError("bounds and integer mask must have length n_vars")
        if len(rows) and (rows.min() < 0 or rows.max() >= len(self.rhs)):
            raise ValueError("row index out of range")
        if len(cols) and (cols.min() < 0 or cols.max() >= n):
            raise ValueError("column index out of range")

    @classmethod
    def from_dense(cls, obj, A, rhs, lower, upper, integer_mask) -> "MilpInstance":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.size == 0:
            A = np.zeros((len(np.atleast_1d(rhs)), len(np.atleast_1d(obj))))
        rows, cols = np.nonzero(A)
        return cls(obj, rows, cols, A[rows, cols], rhs, lower, upper, integer_mask)

    @property
    def n_vars(self) -> int:
        return len(self.obj)

    @property
    def n_cons(self) -> int:
        return len(self.rhs)

    @property
    def n_int(self) -> int:
        return int(self.integer_mask.sum())

    def dense(self) -> np.ndarray:
        A = np.zeros((self.n_cons, self.n_vars))
        # add.at so duplicates (invalid but representable) still show up
        np.add.at(A, (self.rows, self.cols), self.vals)
        return A

    def permuted(self, perm) -> "MilpInstance":
        """Return the instance with variable ``perm[k]`` moved to position ``k``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return MilpInstance(
            self.obj[perm], self.rows, inv[self.cols], self.vals, self.rhs,
            self.lower[perm], self.upper[perm], self.integer_mask[perm],
        )

    def __eq__(self, other):
        if not isinstance(other, MilpInstance):
            return NotImplemented
        fields = ("obj", "rows", "cols", "vals", "rhs", "lower", "upper", "integer_mask")
        return all(
            getattr(self, f).shape == getattr(other, f).shape
            and np.array_equal(getattr(self, f), getattr(other, f))
            for f in fields
        )

    __hash__ = None


def validate(instance: MilpInstance) -> Violation | None:
    """Return the first violated invariant of ``instance``, or ``None`` if valid."""
    for name in ("obj", "rhs"):
        arr = getattr(instance, name)
        bad = np.flatnonzero(~np.isfinite(arr))
        if len(bad):
            return Violation("nonfinite", f"non-finite {name} entry at index {bad[0]}")
    bad = np.flatnonzero(~np.isfinite(instance.vals))
    if len(bad):
        k = bad[0]
        return Violation(
            "nonfinite",
            f"non-finite coefficient at ({instance.rows[k]}, {instance.cols[k]})",
        )
    if len(instance.rows) > 1:
        same = (np.diff(instance.rows) == 0) & (np.diff(instance.cols) == 0)
        if same.any():
            k = np.flatnonzero(same)[0]
            return Violation(
                "duplicate",
                f"duplicate coefficient at ({instance.rows[k]}, {instance.cols[k]})",
            )
    if np.isnan(instance.lower).any() or np.isnan(instance.upper).any():
        return Violation("nan-bound", "NaN bound")
    crossed = np.flatnonzero(instance.lower > instance.upper)
    if len(crossed):
        return Violation("bound-cross", f"bound cross at var {crossed[0]}")
    for j in np.flatnonzero(instance.integer_mask):
        lo, up = instance.lower[j], instance.upper[j]
        if not (np.isfinite(lo) and np.isfinite(up)):
            return Violation("int-bound", f"integer var {j} has an infinite bound")
        if lo != np.floor(lo) or up != np.floor(up):
            return Violation("int-bound", f"integer var {j} has a fractional bound")
    return None


def generate_set_cover(n_rows: int, n_cols: int, density: float, seed: int,
                       cost_max: int = 100, max_redraws: int = 100) -> MilpInstance:
    """Random binary set-cover instance, each row covered by at least two columns.

    Rows ``sum_j a_ij x_j >= 1`` are stored negated as ``<= -1``. Costs are
    integers drawn uniformly from ``[1, cost_max]``; ``cost_max=1`` gives the
    (highly symmetric, harder to branch) minimum-cardinality variant.
    """
    if n_rows < 1 or n_cols < n_rows:
        raise ValueError("need n_rows >= 1 and n_cols >= n_rows")
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    if cost_max < 1:
        raise ValueError("cost_max must be at least 1")
    rng = np.random.default_rng(seed)
    cover = np.zeros((n_rows, n_cols), dtype=bool)
    for i in range(n_rows):
        for _ in range(max_redraws):
            row = rng.random(n_cols) < density
            if row.sum() >= 2:
                break
        else:
            raise ValueError(
                f"density {density} too low: row {i} not covered twice "
                f"after {max_redraws} redraws"
            )
        cover[i] = row
    cost = rng.integers(1, cost_max + 1, size=n_cols).astype(float)
    rows, cols = np.nonzero(cover)
    return MilpInstance(
        obj=cost,
        rows=rows,
        cols=cols,
        vals=-np.ones(len(rows)),
        rhs=-np.ones(n_rows),
        lower=np.zeros(n_cols),
        upper=np.ones(n_cols),
        integer_mask=np.ones(n_cols, dtype=bool),
    )


def generate_knapsack_like(n_items: int, n_cons: int, seed: int) -> MilpInstance:
    """Multi-dimensional 0/1 knapsack with negated (weight-correlated) profits.

    Capacities are half the total weight of each dimension, so the zero
    vector is always feasible.
    """
    if n_items < 2 or n_cons < 1:
        raise ValueError("need n_items >= 2 and n_cons >= 1")
    rng = np.random.default_rng(seed)
    weights = rng.integers(1, 31, size=(n_cons, n_items)).astype(float)
    profit = np.round(weights.mean(axis=0) + rng.integers(1, 11, size=n_items))
    capacity = np.floor(weights.sum(axis=1) / 2)
    rows, cols = np.nonzero(weights)
    return MilpInstance(
        obj=-profit,
        rows=rows,
        cols=cols,
        vals=weights[rows, cols],
        rhs=capacity,
        lower=np.zeros(n_items),
        upper=np.ones(n_items),
        integer_mask=np.ones(n_items, dtype=bool),
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def write_instance(instance: MilpInstance) -> str:
    lines = [f"VARS {instance.n_vars}", f"CONS {instance.n_cons}", "OBJ"]
    lines.append(" ".join(_fmt(v) for v in instance.obj))
    lines.append("MAT")
    for i, j, v in zip(instance.rows, instance.cols, instance.vals):
        lines.append(f"{i} {j} {_fmt(v)}")
    lines.append("RHS")
    lines.append(" ".join(_fmt(v) for v in instance.rhs))
    lines.append("BOUNDS")
    for lo, up in zip(instance.lower, instance.upper):
        lines.append(f"{_fmt(lo)} {_fmt(up)}")
    lines.append("INT")
    lines.append(" ".join(str(j) for j in np.flatnonzero(instance.integer_mask)))
    lines.append("END")
    return "\n".join(lines) + "\n"


_SECTIONS = ("OBJ", "MAT", "RHS", "BOUNDS", "INT", "END")


def _floats(tokens, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise InstanceParseError(str(exc), lineno) from None


def read_instance(text: str) -> MilpInstance:
    """Parse the text format; raises :class:`InstanceParseError` on bad input."""
    lines = [
        (k + 1, raw.split("#", 1)[0].strip())
        for k, raw in enumerate(text.splitlines())
    ]
    lines = [(k, s) for k, s in lines if s]
    pos = 0

    def header(key):
        nonlocal pos
        if pos >= len(lines):
            raise InstanceParseError(f"unexpected end of input, expected {key}")
        lineno, s = lines[pos]
        parts = s.split()
        if parts[0] != key or len(parts) != 2:
            raise InstanceParseError(f"expected '{key} <count>'", lineno)
        try:
            count = int(parts[1])
        except ValueError:
            raise InstanceParseError(f"bad count {parts[1]!r}", lineno) from None
        if count < 0:
            raise InstanceParseError("negative count", lineno)
        pos += 1
        return count

    def keyword(key):
        nonlocal pos
        if pos >= len(lines) or lines[pos][1] != key:
            lineno = lines[pos][0] if pos < len(lines) else None
            raise InstanceParseError(f"expected section {key}", lineno)
        pos += 1
        return lines[pos - 1][0]

    def body():
        # lines up to the next section keyword
        nonlocal pos
        out = []
        while pos < len(lines) and lines[pos][1] not in _SECTIONS:
            out.append(lines[pos])
            pos += 1
        return out

    def vector(key, length):
        kw_line = keyword(key)
        chunk = body()
        if length == 0 and not chunk:
            return np.zeros(0)
        if len(chunk) != 1:
            where = chunk[1][0] if len(chunk) > 1 else kw_line
            raise InstanceParseError(f"{key} must be a single line of {length} numbers", where)
        lineno, s = chunk[0]
        vals = _floats(s.split(), lineno)
        if len(vals) != length:
            raise InstanceParseError(
                f"{key} has {len(vals)} entries, expected {length}", lineno)
        return np.array(vals)

    n = header("VARS")
    m = header("CONS")
    obj = vector("OBJ", n)

    keyword("MAT")
    rows, cols, vals = [], [], []
    for lineno, s in body():
        parts = s.split()
        if len(parts) != 3:
            raise InstanceParseError("MAT entries are 'i j coef'", lineno)
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise InstanceParseError("bad MAT index", lineno) from None
        if not (0 <= i < m and 0 <= j < n):
            raise InstanceParseError(f"MAT index ({i}, {j}) out of range", lineno)
        rows.append(i)
        cols.append(j)
        vals.append(_floats(parts[2:], lineno)[0])

    rhs = vector("RHS", m)

    kw_line = keyword("BOUNDS")
    chunk = body()
    if len(chunk) != n:
        where = chunk[-1][0] if chunk else kw_line
        raise InstanceParseError(f"BOUNDS has {len(chunk)} lines, expected {n}", where)
    lower, upper = np.empty(n), np.empty(n)
    for j, (lineno, s) in enumerate(chunk):
        pair = _floats(s.split(), lineno)
        if len(pair) != 2:
            raise InstanceParseError("BOUNDS lines are 'lower upper'", lineno)
        lower[j], upper[j] = pair

    keyword("INT")
    mask = np.zeros(n, dtype=bool)
    for lineno, s in body():
        for tok in s.split():
            try:
                j = int(tok)
            except ValueError:
                raise InstanceParseError(f"bad INT index {tok!r}", lineno) from None
            if not 0 <= j < n:
                raise InstanceParseError(f"INT index {j} out of range", lineno)
            mask[j] = True
    keyword("END")
    if pos != len(lines):
        raise InstanceParseError("trailing content after END", lines[pos][0])

    instance = MilpInstance(obj, rows, cols, vals, rhs, lower, upper, mask)
    problem = validate(instance)
    if problem is not None:
        raise InstanceParseError(f"invalid instance: {problem.message}")
    return instance
