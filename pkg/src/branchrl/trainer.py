"""Training loop for the branching Q-network.

Double DQN with permanent demonstrations, gated admission of self-generated
episodes and a superior network that tracks the best evaluated weights.
Three arms are supported:

``dqn``
    no demonstrations, every transition stored immediately, no superior term.
``dqfd``
    demonstrations plus immediate storage, no superior term.
``dqfdws``
    demonstrations, gated storage at evaluation boundaries, superior term.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .engine import BranchingEnv, BranchObs, Limits, SolveReport
from .featurize import extract
from .instances import MilpInstance, generate_knapsack_like, generate_set_cover
from .policies import make_policy
from .qnet import (AdamState, adam_step, copy_params, forward, init_params,
                   loss_and_grads, params_digest)
from .replay import ReplayBuffer, Transition, flush_episode

__all__ = [
    "ABLATIONS",
    "TrainerConfig",
    "TrainReport",
    "InstanceFamily",
    "GreedyQPolicy",
    "epsilon_greedy",
    "greedy_action",
    "collect_demonstrations",
    "evaluate_policy",
    "episode_returns",
    "policy_returns",
    "train",
]

ABLATIONS = ("dqn", "dqfd", "dqfdws")
EVAL_SEED_BASE = 1_000_000  # held-out instances never collide with training seeds


@dataclass(frozen=True)
class InstanceFamily:
    """A seeded instance generator: ``set_cover`` or ``knapsack``."""

    kind: str = "set_cover"
    params: dict = field(default_factory=lambda: {
        "n_rows": 20, "n_cols": 20, "density": 0.5, "cost_max": 1})

    def __post_init__(self):
        if self.kind not in ("set_cover", "knapsack"):
            raise ValueError(f"unknown instance family {self.kind!r}")

    def make(self, seed: int) -> MilpInstance:
        if self.kind == "set_cover":
            return generate_set_cover(seed=seed, **self.params)
        return generate_knapsack_like(seed=seed, **self.params)

    def held_out(self, count: int) -> list[MilpInstance]:
        return [self.make(EVAL_SEED_BASE + k) for k in range(count)]


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    epsilon: float = 0.01
    lr: float = 0.001
    batch_size: int = 32
    tau_target: int = 500
    tau_superior: int = 1000
    total_steps: int = 50000
    capacity_self: int = 10000
    demo_size: int = 2000
    lambda_superior: float = 1.0
    g0_mode: str = "ewma"  # "ewma" or "fixed"
    g0_value: float = 0.0  # threshold when g0_mode == "fixed"
    g0_decay: float = 0.9
    seed: int = 0
    ablation: str = "dqfdws"
    warmup_steps: int | None = None  # None: 25% of total_steps
    reward_scale: float | None = None  # None: 1/max_work when finite, else 1
    width: int = 64
    demo_expert: str = "sb"  # "sb", "pc" or "mixed"
    max_work: float | None = 2000.0  # None means unlimited
    max_nodes: float | None = math.inf
    family: str = "set_cover"
    family_params: dict = field(default_factory=lambda: {
        "n_rows": 20, "n_cols": 20, "density": 0.5, "cost_max": 1})
    eval_size: int = 10

    def __post_init__(self):
        for k in ("max_work", "max_nodes"):
            if getattr(self, k) is None:  # JSON has no infinity
                object.__setattr__(self, k, math.inf)
        if self.tau_target <= 0 or self.tau_superior <= 0:
            raise ValueError("update periods must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.g0_mode not in ("ewma", "fixed"):
            raise ValueError("g0_mode must be 'ewma' or 'fixed'")
        if self.demo_expert not in ("sb", "pc", "mixed"):
            raise ValueError("demo_expert must be 'sb', 'pc' or 'mixed'")
        if self.batch_size <= 0 or self.total_steps < 0 or self.capacity_self < 0:
            raise ValueError("batch_size, total_steps and capacity_self must be valid sizes")

    @property
    def limits(self) -> Limits:
        return Limits(max_work=self.max_work, max_nodes=self.max_nodes)

    @property
    def instance_family(self) -> InstanceFamily:
        return InstanceFamily(self.family, dict(self.family_params))

    @property
    def effective_warmup(self) -> int:
        if self.warmup_steps is None:
            return self.total_steps // 4
        return self.warmup_steps

    @property
    def effective_reward_scale(self) -> float:
        if self.reward_scale is not None:
            return self.reward_scale
        return 1.0 / self.max_work if math.isfinite(self.max_work) else 1.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("max_work", "max_nodes"):
            if math.isinf(d[k]):
                d[k] = None
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "TrainerConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class TrainReport:
    eval_curve: list[tuple[int, float]]
    G_best: float
    admitted_episodes: int
    admitted_transitions: int
    theta: dict
    theta_superior: dict
    losses: list[float] = field(default_factory=list)

    def eval_curve_csv(self) -> str:
        lines = ["step,G"]
        lines += [f"{step},{g!r}" for step, g in self.eval_curve]
        return "\n".join(lines) + "\n"


def greedy_action(q: np.ndarray) -> int:
    """First index attaining the maximum of a masked Q vector."""
    if not np.any(np.isfinite(q)):
        raise ValueError("no unmasked entries")
    return int(np.argmax(q))


def epsilon_greedy(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Argmax with probability ``1 - epsilon``, else a uniform candidate.

    ``q`` is masked: non-candidates are ``-inf``. One uniform draw decides
    the branch so the stream of random numbers does not depend on ``q``.
    """
    cands = np.flatnonzero(np.isfinite(q))
    if len(cands) == 0:
        raise ValueError("all actions are masked")
    if rng.random() < epsilon:
        return int(cands[rng.integers(len(cands))])
    return greedy_action(q)


class GreedyQPolicy:
    """Branching policy picking the highest Q-value candidate."""

    name = "learned"

    def __init__(self, params):
        self.params = params

    def __call__(self, tree, node, candidates) -> int:
        state = extract(node, tree.instance, list(candidates))
        return greedy_action(forward(self.params, state))


def _run_episode(env: BranchingEnv, instance: MilpInstance, choose) -> float:
    obs = env.reset(instance)
    if isinstance(obs, SolveReport):
        return obs.dual_integral
    rewards = []
    while True:
        obs, r, done = env.step(choose(obs))
        rewards.append(r)
        if done:
            return math.fsum(rewards)


def episode_returns(params, instances: Sequence[MilpInstance], limits: Limits) -> list[float]:
    """Greedy episode return on each instance (no exploration)."""
    env = BranchingEnv(limits)
    return [_run_episode(env, inst, lambda o: greedy_action(forward(params, o.state)))
            for inst in instances]


def policy_returns(policy, instances: Sequence[MilpInstance], limits: Limits) -> list[float]:
    """Episode return of a tree policy ``policy(tree, node, candidates)``."""
    env = BranchingEnv(limits)
    return [_run_episode(env, inst, lambda o: policy(env.tree, o.node, o.candidates))
            for inst in instances]


def evaluate_policy(params, instances: Sequence[MilpInstance], limits: Limits) -> float:
    """Mean greedy episode return over a fixed instance list."""
    returns = episode_returns(params, instances, limits)
    return math.fsum(returns) / len(returns) if returns else 0.0


def _next_fields(nxt, done):
    if done:
        return None, ()
    return nxt.state, tuple(nxt.candidates)


def collect_demonstrations(sampler: Callable[[int], MilpInstance], n_transitions: int,
                           limits: Limits, expert: str = "sb", seed: int = 0,
                           max_episodes: int | None = None) -> list[Transition]:
    """Roll out an expert through the environment until ``n_transitions``.

    ``sampler(k)`` returns the ``k``-th training instance. ``expert`` is
    ``sb``, ``pc`` or ``mixed`` (alternating by episode). Rewards are the raw
    environment rewards.
    """
    out: list[Transition] = []
    env = BranchingEnv(limits)
    episode = 0
    cap = max_episodes if max_episodes is not None else 100 * max(n_transitions, 1)
    while len(out) < n_transitions:
        if episode >= cap:
            raise RuntimeError(f"only {len(out)} demonstrations after {episode} episodes")
        name = expert if expert != "mixed" else ("sb", "pc")[episode % 2]
        policy = make_policy(name, seed=seed)
        obs = env.reset(sampler(episode))
        episode += 1
        while isinstance(obs, BranchObs) and len(out) < n_transitions:
            action = policy(env.tree, obs.node, obs.candidates)
            nxt, r, done = env.step(action)
            state, cands = _next_fields(nxt, done)
            out.append(Transition(obs.state, action, r, state, cands, done, origin="demo"))
            obs = nxt
    return out


def _scaled(transitions, scale):
    if scale == 1.0:
        return list(transitions)
    return [dataclasses.replace(t, reward=t.reward * scale) for t in transitions]


def train(config: TrainerConfig, train_sampler: Callable[[int], MilpInstance] | None = None,
          eval_instances: Sequence[MilpInstance] | None = None,
          demos: Sequence[Transition] | None = None,
          hook: Callable[[int, dict], None] | None = None) -> TrainReport:
    """Run the training loop for ``config.total_steps`` gradient steps.

    ``train_sampler(k)`` gives the ``k``-th training instance (defaults to the
    configured family, seeds ``seed * 10**6 + k``); ``eval_instances``
    defaults to the family's held-out set. ``demos`` (raw rewards) are
    collected from the configured expert when absent. ``hook(step, info)``
    is called after every step with digests of the target and superior
    networks and the evaluation outcome, if any.
    """
    cfg = config
    family = cfg.instance_family
    if train_sampler is None:
        train_sampler = lambda k: family.make(cfg.seed * 1_000_000 + k)  # noqa: E731
    if eval_instances is None:
        eval_instances = family.held_out(cfg.eval_size)
    limits = cfg.limits
    scale = cfg.effective_reward_scale
    use_demos = cfg.ablation != "dqn"
    gated = cfg.ablation == "dqfdws"
    superior = cfg.ablation == "dqfdws"

    if use_demos:
        if demos is None:
            demos = collect_demonstrations(train_sampler, cfg.demo_size, limits,
                                           cfg.demo_expert, cfg.seed)
        demos = list(demos)[:cfg.demo_size]
    else:
        demos = []
    buffer = ReplayBuffer(_scaled(demos, scale), cfg.capacity_self)

    ss = np.random.SeedSequence(cfg.seed)
    act_rng, batch_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    theta = init_params(cfg.seed, width=cfg.width)
    theta_t = copy_params(theta)
    theta_s = copy_params(theta)
    opt = AdamState.for_params(theta)

    env = BranchingEnv(limits)
    temp: list[Transition] = []
    temp_episodes: set[int] = set()
    episode = -1
    next_instance = 0
    obs: BranchObs | None = None
    g0: float | None = cfg.g0_value if cfg.g0_mode == "fixed" else None
    g_best = 0.0
    curve: list[tuple[int, float]] = []
    losses: list[float] = []
    admitted_eps = admitted_tr = 0

    for t in range(1, cfg.total_steps + 1):
        while obs is None:
            if next_instance > cfg.total_steps + 10_000:
                raise RuntimeError("training sampler yields no instance needing a decision")
            reset = env.reset(train_sampler(next_instance))
            next_instance += 1
            if isinstance(reset, BranchObs):
                obs = reset
                episode += 1

        action = epsilon_greedy(forward(theta, obs.state), cfg.epsilon, act_rng)
        nxt, r, done = env.step(action)
        state, cands = _next_fields(nxt, done)
        tr = Transition(obs.state, action, r * scale, state, cands, done, origin="self")
        if gated:
            temp.append(tr)
            temp_episodes.add(episode)
        else:
            buffer.push(tr)

        batch = buffer.sample(cfg.batch_size, batch_rng)
        loss, grads = loss_and_grads(theta, theta_t, theta_s if superior else None, batch,
                                     cfg.gamma, cfg.lambda_superior)
        losses.append(loss)
        theta = adam_step(opt, theta, grads, cfg.lr)

        info: dict = {}
        if t % cfg.tau_target == 0:
            theta_t = copy_params(theta)
            info["target_updated"] = True
        if t % cfg.tau_superior == 0:
            g = evaluate_policy(theta, eval_instances, limits)
            threshold = -math.inf if g0 is None else g0
            admit = gated and g > threshold and t > cfg.effective_warmup
            n_temp_eps = len(temp_episodes)
            n = flush_episode(buffer, temp, admit)
            temp_episodes.clear()
            if admit:
                admitted_tr += n
                admitted_eps += n_temp_eps
            if cfg.g0_mode == "ewma":
                g0 = g if g0 is None else cfg.g0_decay * g0 + (1.0 - cfg.g0_decay) * g
            promoted = g > g_best
            if promoted:
                theta_s = copy_params(theta)
                g_best = g
            curve.append((t, g))
            info.update(G=g, G0=threshold, admitted=admit, promoted=promoted, flushed=n)
        if hook is not None:
            info.update(theta_target=params_digest(theta_t), theta_superior=params_digest(theta_s),
                        theta=params_digest(theta), loss=loss)
            hook(t, info)

        obs = None if done else nxt

    return TrainReport(eval_curve=curve, G_best=g_best, admitted_episodes=admitted_eps,
                       admitted_transitions=admitted_tr, theta=theta,
                       theta_superior=theta_s, losses=losses)
