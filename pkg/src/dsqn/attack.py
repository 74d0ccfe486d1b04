"""White-box FGSM robustness evaluation.

The attack loss is the cross-entropy between softmax(Q(x)) and the greedy
action the agent takes on the clean state. Each iteration re-linearizes at
the current adversarial state, adds ``epsilon * sign(grad_x loss)`` and clips
back into the observation range, until the greedy action changes or the
iteration budget runs out.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .envs import preprocess, run_episode
from .errors import AttackFailure, ContractViolation
from .grad.recursive import backward_recursive
from .network import QNetwork, forward
from .qlearn import greedy, select_action


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.01
    max_iters: int = 50
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ContractViolation("attack epsilon must be >= 0")
        if self.max_iters < 1:
            raise ContractViolation("max_iters must be >= 1")
        if not self.clip_min < self.clip_max:
            raise ContractViolation("clip range is empty")


def softmax(q):
    z = np.exp(q - np.max(q))
    return z / z.sum()


def _loss_grad_from_trace(net, q, trace, target_action):
    # d/dq of -log softmax(q)[target] is softmax(q) - onehot(target)
    dq = softmax(q.astype(np.float64)).astype(q.dtype)
    dq[target_action] -= 1
    g = backward_recursive(trace, net, dq, input_grad=True).input_grad
    if not np.all(np.isfinite(g)):
        raise AttackFailure("non-finite input gradient")
    return g


def _check_input(x, cfg):
    x = np.asarray(x)
    if np.any(x < cfg.clip_min) or np.any(x > cfg.clip_max):
        raise ContractViolation("attack input lies outside the clip range")
    return x


def fgsm_perturb(net: QNetwork, x, cfg: AttackConfig, target_action=None) -> np.ndarray:
    """One FGSM step ``epsilon * sign(grad_x L)``.

    ``target_action`` is the label for the cross-entropy; it defaults to the
    greedy action at ``x`` itself.
    """
    x = _check_input(x, cfg)
    q, trace = forward(net, x)
    a = greedy(q) if target_action is None else int(target_action)
    g = _loss_grad_from_trace(net, q, trace, a)
    return (cfg.epsilon * np.sign(g)).astype(net.dtype)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    flipped: bool
    iters_used: int
    clean_action: int
    adv_action: int


def iterative_attack(net: QNetwork, x, cfg: AttackConfig) -> AttackResult:
    """Repeat FGSM steps until the greedy action differs from the clean one."""
    x = _check_input(x, cfg).astype(net.dtype)
    q, trace = forward(net, x)
    a0 = greedy(q)
    x_adv = x
    for it in range(1, cfg.max_iters + 1):
        g = _loss_grad_from_trace(net, q, trace, a0)
        eta = (cfg.epsilon * np.sign(g)).astype(net.dtype)
        nxt = np.clip(x_adv + eta, cfg.clip_min, cfg.clip_max).astype(net.dtype)
        if np.array_equal(nxt, x_adv):
            # fixed point: later iterations would repeat this exact state
            return AttackResult(x_adv, False, cfg.max_iters, a0, a0)
        x_adv = nxt
        q, trace = forward(net, x_adv)
        a = greedy(q)
        if a != a0:
            return AttackResult(x_adv, True, it, a0, a)
    return AttackResult(x_adv, False, cfg.max_iters, a0, a0)


def decay_rate(before: float, after: float):
    """Percentage decline from ``before`` to ``after``; None when ``before <= 0``."""
    if before <= 0:
        return None
    return 100.0 * (before - after) / before


@dataclass
class AttackReport:
    """Clean vs attacked scores. ``decay_rate`` is a percentage (60.57 means 60.57%)."""

    env: str
    epsilon: float
    max_iters: int
    before: float
    after: float
    decay_rate: float | None
    flip_fraction: float
    episode_flip_fractions: list[float] = field(default_factory=list)
    before_returns: list[float] = field(default_factory=list)
    after_returns: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        keys = ("env", "epsilon", "max_iters", "before", "after", "decay_rate", "flip_fraction")
        d = asdict(self)
        return json.dumps({k: d[k] for k in keys})


def attacked_eval(net: QNetwork, env, episodes: int, cfg: AttackConfig, rng: np.random.Generator,
                  eval_epsilon: float = 0.05, noop_max: int = 30) -> AttackReport:
    """Evaluate clean, then again with every observed state replaced by its attacked version.

    Both passes start from the same environment and policy random states, so
    with epsilon = 0 the two passes are identical.
    """
    if episodes < 1:
        raise ContractViolation("attacked_eval needs at least one episode")
    env_state = copy.deepcopy(env.rng_state())
    rng_state = copy.deepcopy(rng.bit_generator.state)

    def clean_act(obs):
        return select_action(net, preprocess(obs, env.observation_shape), eval_epsilon, rng)

    before = [run_episode(env, clean_act, noop_max, rng) for _ in range(episodes)]

    env.set_rng_state(env_state)
    rng.bit_generator.state = rng_state
    counts = []

    def attacked_act(obs):
        res = iterative_attack(net, preprocess(obs, env.observation_shape), cfg)
        counts[-1][0] += res.flipped
        counts[-1][1] += 1
        return select_action(net, res.x_adv, eval_epsilon, rng)

    after = []
    for _ in range(episodes):
        counts.append([0, 0])
        after.append(run_episode(env, attacked_act, noop_max, rng))
    per_ep = [f / n if n else 0.0 for f, n in counts]
    total = sum(n for _, n in counts)
    b, a = float(np.mean(before)), float(np.mean(after))
    return AttackReport(
        env=getattr(env, "name", ""),
        epsilon=float(cfg.epsilon),
        max_iters=cfg.max_iters,
        before=b,
        after=a,
        decay_rate=decay_rate(b, a),
        flip_fraction=(sum(f for f, _ in counts) / total) if total else 0.0,
        episode_flip_fractions=per_ep,
        before_returns=before,
        after_returns=after,
    )
