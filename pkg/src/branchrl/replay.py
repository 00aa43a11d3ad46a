"""Replay storage: permanent demonstrations plus a FIFO ring of admitted
self-generated transitions. Sampling is uniform over the union."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .featurize import BipartiteState

__all__ = [
    "Transition",
    "ReplayBuffer",
    "flush_episode",
    "save_transitions",
    "load_transitions",
    "TRANSITIONS_FORMAT",
]

TRANSITIONS_FORMAT = "branchrl-transitions-v1"


@dataclass(frozen=True, eq=False)
class Transition:
    state: BipartiteState
    action: int
    reward: float
    next_state: BipartiteState | None
    next_candidates: tuple[int, ...]
    done: bool
    origin: str = "self"  # "demo" or "self"

    def __post_init__(self):
        if self.done and self.next_state is not None:
            raise ValueError("terminal transitions carry no next state")
        if not self.done and (self.next_state is None or not self.next_candidates):
            raise ValueError("non-terminal transitions need a next state and candidates")
        if not self.state.candidate_mask[self.action]:
            raise ValueError(f"action {self.action} is not a candidate of its state")


class ReplayBuffer:
    """Demonstrations are stored verbatim and never evicted; self-generated
    transitions live in a ring of ``capacity_self`` slots."""

    def __init__(self, demo_transitions: Iterable[Transition] = (), capacity_self: int = 0):
        if capacity_self < 0:
            raise ValueError("capacity_self must be nonnegative")
        self._demo = tuple(demo_transitions)
        self.capacity_self = capacity_self
        self._ring: list[Transition] = []
        self._cursor = 0
        self.pushed = 0

    @property
    def demo(self) -> tuple[Transition, ...]:
        return self._demo

    @property
    def ring(self) -> list[Transition]:
        """Self-generated transitions, oldest first."""
        if len(self._ring) < self.capacity_self:
            return list(self._ring)
        return self._ring[self._cursor:] + self._ring[:self._cursor]

    def __len__(self) -> int:
        return len(self._demo) + len(self._ring)

    def push(self, transition: Transition) -> None:
        self.pushed += 1
        if self.capacity_self == 0:
            return
        if len(self._ring) < self.capacity_self:
            self._ring.append(transition)
        else:
            self._ring[self._cursor] = transition
            self._cursor = (self._cursor + 1) % self.capacity_self

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        """Uniform draw with replacement over demonstrations and ring."""
        total = len(self)
        if total == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        n_demo = len(self._demo)
        picks = rng.integers(total, size=batch_size)
        return [self._demo[k] if k < n_demo else self._ring[k - n_demo] for k in picks]


def flush_episode(buffer: ReplayBuffer, temp: list[Transition], admit: bool) -> int:
    """Move ``temp`` into the ring when ``admit``; ``temp`` is always emptied.

    Returns the number of admitted transitions.
    """
    count = 0
    if admit:
        for t in temp:
            buffer.push(t)
        count = len(temp)
    temp.clear()
    return count


_STATE_KEYS = ("cons_feats", "var_feats", "edge_cons", "edge_vars", "edge_feats", "candidate_mask")


def save_transitions(path, transitions: Sequence[Transition]) -> None:
    """Write transitions to one ``.npz``: per-field arrays concatenated with offsets."""
    arrays: dict[str, np.ndarray] = {"__format__": np.array(TRANSITIONS_FORMAT)}
    states = [t.state for t in transitions]
    nexts = [t.next_state for t in transitions if t.next_state is not None]
    for prefix, group in (("s", states), ("n", nexts)):
        for key in _STATE_KEYS:
            parts = [getattr(s, key) for s in group]
            lens = [len(p) for p in parts]
            arrays[f"{prefix}/{key}/len"] = np.asarray(lens, dtype=np.int64)
            if parts:
                arrays[f"{prefix}/{key}"] = np.concatenate(parts)
            else:
                width = {"cons_feats": 4, "var_feats": 8, "edge_feats": 1}.get(key)
                shape = (0, width) if width else (0,)
                arrays[f"{prefix}/{key}"] = np.zeros(shape)
    arrays["action"] = np.asarray([t.action for t in transitions], dtype=np.int64)
    arrays["reward"] = np.asarray([t.reward for t in transitions], dtype=float)
    arrays["done"] = np.asarray([t.done for t in transitions], dtype=bool)
    arrays["origin"] = np.asarray([t.origin for t in transitions], dtype=str)
    cands = [np.asarray(t.next_candidates, dtype=np.int64) for t in transitions]
    arrays["next_candidates/len"] = np.asarray([len(c) for c in cands], dtype=np.int64)
    arrays["next_candidates"] = np.concatenate(cands) if cands else np.zeros(0, dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _split(data, prefix, key):
    flat = data[f"{prefix}/{key}"]
    ends = np.cumsum(data[f"{prefix}/{key}/len"])
    return np.split(flat, ends[:-1]) if len(ends) else []


def load_transitions(path) -> list[Transition]:
    with np.load(path, allow_pickle=False) as data:
        if "__format__" not in data or str(data["__format__"]) != TRANSITIONS_FORMAT:
            raise ValueError(f"{path}: not a {TRANSITIONS_FORMAT} file")

        def states(prefix):
            cols = {k: _split(data, prefix, k) for k in _STATE_KEYS}
            count = len(data[f"{prefix}/var_feats/len"])
            out = []
            for i in range(count):
                out.append(BipartiteState(
                    cons_feats=cols["cons_feats"][i].reshape(-1, 4),
                    var_feats=cols["var_feats"][i].reshape(-1, 8),
                    edge_cons=cols["edge_cons"][i].astype(np.int64),
                    edge_vars=cols["edge_vars"][i].astype(np.int64),
                    edge_feats=cols["edge_feats"][i].reshape(-1, 1),
                    candidate_mask=cols["candidate_mask"][i].astype(bool),
                ))
            return out

        s, nx = states("s"), states("n")
        ends = np.cumsum(data["next_candidates/len"])
        cands = np.split(data["next_candidates"], ends[:-1]) if len(ends) else []
        out = []
        k = 0
        for i in range(len(s)):
            done = bool(data["done"][i])
            nxt = None
            if not done:
                nxt = nx[k]
                k += 1
            out.append(Transition(
                state=s[i], action=int(data["action"][i]), reward=float(data["reward"][i]),
                next_state=nxt, next_candidates=tuple(int(v) for v in cands[i]),
                done=done, origin=str(data["origin"][i]),
            ))
        return out
