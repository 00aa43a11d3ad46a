"""GCNN Q-network on bipartite states, with hand-written reverse mode and Adam.

Architecture (width ``h``)::

    v, c, e   <- affine embeddings of variable, constraint and edge features
    c_i       <- f_c([c_i, sum_j g_c([c_i, v_j, e_ij])])     # constraints first
    v_j       <- f_v([v_j, sum_i g_v([c_i, v_j, e_ij])])     # then variables
    q_j       <- head(v_j)

``f_*``, ``g_*`` and ``head`` are Linear-ReLU-Linear perceptrons. Several
graphs are evaluated at once as one disjoint union (no padding); edge sums are
sparse incidence products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .featurize import CONS_FEATS, EDGE_FEATS, VAR_FEATS, BipartiteState

__all__ = [
    "WIDTH",
    "CHECKPOINT_FORMAT",
    "GraphBatch",
    "batch_states",
    "init_params",
    "param_count",
    "forward",
    "q_values",
    "PreparedBatch",
    "prepare_batch",
    "loss_and_grads",
    "AdamState",
    "adam_step",
    "save_params",
    "load_params",
    "copy_params",
    "params_digest",
]

WIDTH = 64
CHECKPOINT_FORMAT = "branchrl-qnet-v1"

# (name, fan_in multiple of h or a feature dim, fan_out)
_MLPS = ("gc", "fc", "gv", "fv")


def _shapes(dv: int, dc: int, de: int, h: int) -> dict[str, tuple[int, ...]]:
    s = {
        "ve_W": (dv, h), "ve_b": (h,),
        "ce_W": (dc, h), "ce_b": (h,),
        "ee_W": (de, h), "ee_b": (h,),
    }
    fan = {"gc": 3 * h, "fc": 2 * h, "gv": 3 * h, "fv": 2 * h}
    for name in _MLPS:
        s[f"{name}_W1"] = (fan[name], h)
        s[f"{name}_b1"] = (h,)
        s[f"{name}_W2"] = (h, h)
        s[f"{name}_b2"] = (h,)
    s["hd_W1"] = (h, h)
    s["hd_b1"] = (h,)
    s["hd_W2"] = (h, 1)
    s["hd_b2"] = (1,)
    return s


def init_params(seed: int, width: int = WIDTH, dv: int = len(VAR_FEATS),
                dc: int = len(CONS_FEATS), de: int = len(EDGE_FEATS)) -> dict[str, np.ndarray]:
    """Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)); biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _shapes(dv, dc, de, width).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def param_count(dv: int, dc: int, de: int, h: int) -> int:
    return sum(int(np.prod(s)) for s in _shapes(dv, dc, de, h).values())


def copy_params(params):
    return {k: v.copy() for k, v in params.items()}


def params_digest(params) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


class _Segments:
    """Sum rows that share an index, as one prebuilt sparse incidence product."""

    def __init__(self, idx: np.ndarray, n: int):
        k = len(idx)
        self.matrix = sp.csr_matrix((np.ones(k), (idx, np.arange(k))), shape=(n, k))
        self.counts = np.bincount(idx, minlength=n).astype(float)

    def sum(self, rows: np.ndarray) -> np.ndarray:
        return np.asarray(self.matrix @ rows)


@dataclass(eq=False)
class GraphBatch:
    var_feats: np.ndarray
    cons_feats: np.ndarray
    edge_feats: np.ndarray
    edge_cons: np.ndarray
    edge_vars: np.ndarray
    var_offsets: np.ndarray  # start of each graph's variables, plus total
    candidate_mask: np.ndarray

    def __post_init__(self):
        self.by_cons = _Segments(self.edge_cons, len(self.cons_feats))
        self.by_var = _Segments(self.edge_vars, len(self.var_feats))

    @property
    def n_graphs(self) -> int:
        return len(self.var_offsets) - 1


def batch_states(states: Sequence[BipartiteState]) -> GraphBatch:
    vo, co = [0], [0]
    for s in states:
        vo.append(vo[-1] + s.n_vars)
        co.append(co[-1] + s.n_cons)
    return GraphBatch(
        var_feats=np.concatenate([s.var_feats for s in states]),
        cons_feats=np.concatenate([s.cons_feats for s in states]),
        edge_feats=np.concatenate([s.edge_feats for s in states]),
        edge_cons=np.concatenate([s.edge_cons + co[k] for k, s in enumerate(states)]),
        edge_vars=np.concatenate([s.edge_vars + vo[k] for k, s in enumerate(states)]),
        var_offsets=np.asarray(vo),
        candidate_mask=np.concatenate([s.candidate_mask for s in states]),
    )


def _as_batch(graphs) -> GraphBatch:
    if isinstance(graphs, GraphBatch):
        return graphs
    if isinstance(graphs, BipartiteState):
        return batch_states([graphs])
    return batch_states(list(graphs))


def _relu(x):
    return np.maximum(x, 0.0)


def _conv(p, name, src, dst, edge_feats, src_idx, dst_idx, segments, h):
    """One half-convolution: ``dst <- f([dst, sum g([.., .., e])])``.

    ``src``/``dst`` name which side is gathered for the ``c``/``v`` slots of
    ``g``. The second layer of ``g`` is linear, so hidden activations are
    summed per node before it is applied, and the affine edge embedding is
    folded into the first layer. Both are exact rewrites.
    """
    W1 = p[f"g{name}_W1"]
    W1e = W1[2 * h:]
    # slot order in g is always (constraint, variable, edge)
    cons_side, var_side, cons_idx, var_idx = (dst, src, dst_idx, src_idx) if name == "c" \
        else (src, dst, src_idx, dst_idx)
    pc = cons_side @ W1[:h]
    pv = var_side @ W1[h:2 * h]
    pe = edge_feats @ (p["ee_W"] @ W1e)
    a1 = pc[cons_idx] + pv[var_idx] + pe + (p["ee_b"] @ W1e + p[f"g{name}_b1"])
    r1 = _relu(a1)
    hsum = segments.sum(r1)
    agg = hsum @ p[f"g{name}_W2"] + np.outer(segments.counts, p[f"g{name}_b2"])
    F1 = p[f"f{name}_W1"]
    a2 = dst @ F1[:h] + agg @ F1[h:] + p[f"f{name}_b1"]
    r2 = _relu(a2)
    out = r2 @ p[f"f{name}_W2"] + p[f"f{name}_b2"]
    cache = (cons_side, var_side, cons_idx, var_idx, a1, hsum, agg, dst, a2, r2)
    return out, cache


def _conv_backward(p, name, dout, cache, edge_feats, h, grads, seg_cons, seg_var):
    """Backward of :func:`_conv`; edge-embedding gradients are accumulated here."""
    cons_side, var_side, cons_idx, var_idx, a1, hsum, agg, dst, a2, r2 = cache
    grads[f"f{name}_W2"] += r2.T @ dout
    grads[f"f{name}_b2"] += dout.sum(axis=0)
    da2 = (dout @ p[f"f{name}_W2"].T) * (a2 > 0)
    F1 = p[f"f{name}_W1"]
    grads[f"f{name}_W1"][:h] += dst.T @ da2
    grads[f"f{name}_W1"][h:] += agg.T @ da2
    grads[f"f{name}_b1"] += da2.sum(axis=0)
    d_dst = da2 @ F1[:h].T
    d_agg = da2 @ F1[h:].T
    segments = seg_cons if name == "c" else seg_var
    grads[f"g{name}_W2"] += hsum.T @ d_agg
    grads[f"g{name}_b2"] += segments.counts @ d_agg
    d_hsum = d_agg @ p[f"g{name}_W2"].T
    dst_idx = cons_idx if name == "c" else var_idx
    da1 = d_hsum[dst_idx] * (a1 > 0)
    sum_da1 = da1.sum(axis=0)
    grads[f"g{name}_b1"] += sum_da1
    W1 = p[f"g{name}_W1"]
    W1e = W1[2 * h:]
    dpc = seg_cons.sum(da1)
    dpv = seg_var.sum(da1)
    grads[f"g{name}_W1"][:h] += cons_side.T @ dpc
    grads[f"g{name}_W1"][h:2 * h] += var_side.T @ dpv
    dM = edge_feats.T @ da1  # gradient of the folded edge projection ee_W @ W1e
    grads[f"g{name}_W1"][2 * h:] += p["ee_W"].T @ dM + np.outer(p["ee_b"], sum_da1)
    grads["ee_W"] += dM @ W1e.T
    grads["ee_b"] += sum_da1 @ W1e.T
    d_cons = dpc @ W1[:h].T
    d_var = dpv @ W1[h:2 * h].T
    return d_dst, d_cons, d_var


def _forward(p, g: GraphBatch, keep_cache: bool):
    h = p["ve_b"].shape[0]
    v0 = g.var_feats @ p["ve_W"] + p["ve_b"]
    c0 = g.cons_feats @ p["ce_W"] + p["ce_b"]
    ef, ec, ev = g.edge_feats, g.edge_cons, g.edge_vars
    c1, cache_c = _conv(p, "c", v0, c0, ef, ev, ec, g.by_cons, h)
    v1, cache_v = _conv(p, "v", c1, v0, ef, ec, ev, g.by_var, h)
    a = v1 @ p["hd_W1"] + p["hd_b1"]
    r = _relu(a)
    q = (r @ p["hd_W2"] + p["hd_b2"])[:, 0]
    cache = (cache_c, cache_v, v1, a, r) if keep_cache else None
    return q, cache


def _backward(p, g: GraphBatch, cache, dq) -> dict[str, np.ndarray]:
    h = p["ve_b"].shape[0]
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    cache_c, cache_v, v1, a, r = cache
    dq = dq.reshape(-1, 1)
    grads["hd_W2"] += r.T @ dq
    grads["hd_b2"] += dq.sum(axis=0)
    da = (dq @ p["hd_W2"].T) * (a > 0)
    grads["hd_W1"] += v1.T @ da
    grads["hd_b1"] += da.sum(axis=0)
    dv1 = da @ p["hd_W1"].T

    ef = g.edge_feats
    # variable pass: dst=v0, cons slot=c1, var slot=v0
    d_v0, d_c1, d_v0_slot = _conv_backward(p, "v", dv1, cache_v, ef, h, grads, g.by_cons, g.by_var)
    # constraint pass: dst=c0, cons slot=c0, var slot=v0
    d_c0, d_c0_slot, d_v0b = _conv_backward(p, "c", d_c1, cache_c, ef, h, grads, g.by_cons, g.by_var)
    dv0 = d_v0 + d_v0_slot + d_v0b
    dc0 = d_c0 + d_c0_slot

    grads["ve_W"] += g.var_feats.T @ dv0
    grads["ve_b"] += dv0.sum(axis=0)
    grads["ce_W"] += g.cons_feats.T @ dc0
    grads["ce_b"] += dc0.sum(axis=0)
    return grads


def q_values(params, graphs) -> np.ndarray:
    """Raw per-variable Q-values for one state or a concatenated batch."""
    q, _ = _forward(params, _as_batch(graphs), keep_cache=False)
    return q


def forward(params, state: BipartiteState, masked: bool = True) -> np.ndarray:
    """Q-values for ``state``; non-candidates are ``-inf`` when ``masked``."""
    q = q_values(params, state)
    if masked:
        q = np.where(state.candidate_mask, q, -np.inf)
    return q


def _masked_argmax(q, g: GraphBatch, next_candidates) -> np.ndarray:
    out = np.empty(g.n_graphs, dtype=np.int64)
    for k in range(g.n_graphs):
        lo = g.var_offsets[k]
        cand = np.asarray(next_candidates[k], dtype=np.int64)
        out[k] = lo + cand[np.argmax(q[lo + cand])]
    return out


@dataclass(eq=False)
class PreparedBatch:
    """Transitions pre-assembled into graph batches for repeated loss calls."""

    graphs: GraphBatch
    action_index: np.ndarray
    rewards: np.ndarray
    live: np.ndarray
    next_graphs: GraphBatch | None
    next_candidates: list

    def __len__(self):
        return len(self.rewards)


def prepare_batch(batch) -> PreparedBatch:
    if isinstance(batch, PreparedBatch):
        return batch
    if not batch:
        raise ValueError("empty batch")
    for t in batch:
        if not t.state.candidate_mask[t.action]:
            raise ValueError(f"stored action {t.action} is outside its candidate set")
    g = batch_states([t.state for t in batch])
    idx = g.var_offsets[:-1] + np.array([t.action for t in batch])
    live = np.array([k for k, t in enumerate(batch) if not t.done], dtype=np.int64)
    gn = batch_states([batch[k].next_state for k in live]) if len(live) else None
    return PreparedBatch(
        graphs=g, action_index=idx,
        rewards=np.array([t.reward for t in batch], dtype=float),
        live=live, next_graphs=gn,
        next_candidates=[batch[k].next_candidates for k in live],
    )


def loss_and_grads(theta, theta_target, theta_superior, batch, gamma: float,
                   superior_weight: float = 1.0, need_grads: bool = True):
    """Mean over the batch of ``(y - Q)^2 + w (Q_sup - Q)^2``.

    ``y = r + gamma * Q_target(s', argmax_{a' in A(s')} Q(s', a'))`` for
    non-terminal transitions and ``y = r`` otherwise. Only ``theta`` receives
    gradients; pass ``theta_superior=None`` or ``superior_weight=0`` to drop
    the superior term. ``batch`` is a list of transitions or a
    :class:`PreparedBatch`. Returns ``(loss, grads)`` (``grads`` is ``None``
    when ``need_grads`` is false).
    """
    pb = prepare_batch(batch)
    g, idx = pb.graphs, pb.action_index
    q, cache = _forward(theta, g, keep_cache=need_grads)
    q_sa = q[idx]

    y = pb.rewards.copy()
    if len(pb.live):
        gn = pb.next_graphs
        a_star = _masked_argmax(q_values(theta, gn), gn, pb.next_candidates)
        y[pb.live] += gamma * q_values(theta_target, gn)[a_star]

    n = len(pb)
    td = y - q_sa
    loss = float(np.sum(td * td)) / n
    dq_sa = -2.0 * td / n
    if theta_superior is not None and superior_weight != 0.0:
        q_sup = q_values(theta_superior, g)[idx]
        diff = q_sup - q_sa
        loss += superior_weight * float(np.sum(diff * diff)) / n
        dq_sa += -2.0 * superior_weight * diff / n
    if not need_grads:
        return loss, None
    dq = np.zeros_like(q)
    np.add.at(dq, idx, dq_sa)
    return loss, _backward(theta, g, cache, dq)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(opt: AdamState, params, grads, lr: float):
    """One bias-corrected Adam update; returns new params and advances ``opt``."""
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    out = {}
    for k, p in params.items():
        gk = grads[k]
        opt.m[k] = b1 * opt.m[k] + (1.0 - b1) * gk
        opt.v[k] = b2 * opt.v[k] + (1.0 - b2) * gk * gk
        out[k] = p - lr * (opt.m[k] / c1) / (np.sqrt(opt.v[k] / c2) + opt.eps)
    return out


def save_params(path, params) -> None:
    """Write an ``.npz`` checkpoint (float64 arrays, bit-exact on reload)."""
    arrays = {f"p/{k}": np.asarray(v) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __format__=np.array(CHECKPOINT_FORMAT), **arrays)


def load_params(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        if "__format__" not in data or str(data["__format__"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
        params = {k[2:]: data[k].copy() for k in data.files if k.startswith("p/")}
    h = params.get("ve_b", np.zeros(0)).shape[0]
    dv = params.get("ve_W", np.zeros((0, 0))).shape[0]
    dc = params.get("ce_W", np.zeros((0, 0))).shape[0]
    de = params.get("ee_W", np.zeros((0, 0))).shape[0]
    expected = _shapes(dv, dc, de, h)
    if set(params) != set(expected):
        raise ValueError(f"{path}: parameter names do not match the network")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise ValueError(f"{path}: {k} has shape {params[k].shape}, expected {shape}")
    if (dv, dc, de) != (len(VAR_FEATS), len(CONS_FEATS), len(EDGE_FEATS)):
        raise ValueError(f"{path}: feature dimensions {(dv, dc, de)} do not match")
    return params
