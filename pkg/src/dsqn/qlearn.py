"""Deep Q-learning on top of the spiking network.

The loss is the plain squared TD error ``(y - Q(s, a))^2`` averaged over the
batch, with ``y = r + gamma * max_a' Q(s', a'; target)``. Its gradient seeds
``dL/dQ`` only at the taken action's output neuron and is handed to the
recursive surrogate-gradient backward pass.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation
from .grad.recursive import GradientSet, backward_recursive
from .network import QNetwork, forward
from .runtime.checkpoint import CheckpointState
from .runtime.seeding import child_seed, make_streams

log = logging.getLogger(__name__)


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool


@dataclass
class Batch:
    """Column-stacked transitions."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    @classmethod
    def from_transitions(cls, items, dtype=np.float32) -> "Batch":
        items = list(items)
        if not items:
            raise ContractViolation("empty batch")
        return cls(
            np.stack([np.asarray(t.s, dtype=dtype) for t in items]),
            np.array([t.a for t in items], dtype=np.int64),
            np.array([t.r for t in items], dtype=dtype),
            np.stack([np.asarray(t.s_next, dtype=dtype) for t in items]),
            np.array([t.done for t in items], dtype=bool),
        )

    def __len__(self):
        return len(self.a)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions, sampled uniformly with replacement.

    Storage is float32 so that buffer contents survive a checkpoint bit-exactly.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractViolation("replay capacity must be positive")
        self.capacity = int(capacity)
        self.pos = 0
        self.size = 0
        self.s = self.s_next = None
        self.a = np.zeros(self.capacity, dtype=np.int64)
        self.r = np.zeros(self.capacity, dtype=np.float32)
        self.done = np.zeros(self.capacity, dtype=bool)

    def __len__(self):
        return self.size

    def push(self, t: Transition):
        if self.s is None:
            shape = np.shape(t.s)
            self.s = np.zeros((self.capacity,) + shape, dtype=np.float32)
            self.s_next = np.zeros_like(self.s)
        if np.shape(t.s) != self.s.shape[1:] or np.shape(t.s_next) != self.s.shape[1:]:
            raise ContractViolation("transition observation shape differs from buffer contents")
        i = self.pos
        self.s[i], self.a[i], self.r[i] = t.s, t.a, t.r
        self.s_next[i], self.done[i] = t.s_next, t.done
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def ordered_indices(self):
        """Indices of the stored transitions, oldest first."""
        start = (self.pos - self.size) % self.capacity
        return (start + np.arange(self.size)) % self.capacity

    def transitions(self) -> list[Transition]:
        return [Transition(self.s[i], int(self.a[i]), float(self.r[i]), self.s_next[i], bool(self.done[i]))
                for i in self.ordered_indices()]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ContractViolation("cannot sample from an empty replay buffer")
        # index relative to the oldest entry so the physical ring layout never matters
        start = (self.pos - self.size) % self.capacity
        idx = (start + rng.integers(0, self.size, size=batch_size)) % self.capacity
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])


@dataclass
class HyperParams:
    """Learning hyper-parameters. Defaults are scaled for the toy environments."""

    gamma: float = 0.99
    lr: float = 1e-3
    batch_size: int = 32
    target_sync: int = 1000
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_anneal: int = 50_000
    eval_epsilon: float = 0.05
    replay_capacity: int = 50_000
    warmup: int = 1000
    train_every: int = 4
    total_steps: int = 150_000
    eval_interval: int = 10_000
    eval_episodes: int = 100
    noop_max: int = 30
    huber: bool = False
    target_return: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractViolation("gamma must lie in [0, 1]")
        for name in ("batch_size", "target_sync", "replay_capacity", "train_every", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive")
        for name in ("lr", "warmup", "eps_anneal", "total_steps", "eval_interval", "noop_max"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative")
        for name in ("eps_start", "eps_end", "eval_epsilon"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractViolation(f"{name} must lie in [0, 1]")

    def epsilon(self, step: int) -> float:
        if self.eps_anneal == 0 or step >= self.eps_anneal:
            return self.eps_end
        return self.eps_start + (self.eps_end - self.eps_start) * step / self.eps_anneal

    def to_dict(self):
        return asdict(self)


@dataclass
class TargetPair:
    """Online network and its periodically synchronized target copy."""

    online: QNetwork
    target: QNetwork = None
    steps_since_sync: int = 0

    def __post_init__(self):
        if self.target is None:
            self.target = self.online.copy()

    def sync(self):
        for dst, src in zip(self.target.params, self.online.params):
            dst[...] = src
        self.steps_since_sync = 0


def td_targets(batch: Batch, target_net: QNetwork, gamma: float) -> np.ndarray:
    """``r`` for terminal transitions, else ``r + gamma * max_a' Q(s', a'; target)``."""
    q_next, _ = forward(target_net, batch.s_next)
    boot = batch.r + gamma * q_next.max(axis=1)
    return np.where(batch.done, batch.r, boot).astype(q_next.dtype)


def td_target(t: Transition, target_net: QNetwork, gamma: float) -> float:
    if t.done:
        return float(t.r)
    q_next, _ = forward(target_net, np.asarray(t.s_next, dtype=target_net.dtype))
    return float(t.r + gamma * np.max(q_next))


def loss_and_grad(batch, nets: TargetPair, hp: HyperParams, targets=None):
    """Mean squared TD error over ``batch`` and its gradient w.r.t. the online weights.

    ``batch`` is a ``Batch`` or a sequence of ``Transition``. ``targets``
    overrides the TD targets (they are treated as constants either way).
    With ``hp.huber`` the residual is clipped to [-1, 1] in the gradient and
    the loss becomes the Huber loss.
    """
    if not isinstance(batch, Batch):
        batch = Batch.from_transitions(batch, dtype=nets.online.dtype)
    n = len(batch)
    if n == 0:
        raise ContractViolation("empty batch")
    q, trace = forward(nets.online, batch.s)
    y = td_targets(batch, nets.target, hp.gamma) if targets is None else np.asarray(targets, dtype=q.dtype)
    rows = np.arange(n)
    resid = y - q[rows, batch.a]
    if hp.huber:
        absr = np.abs(resid)
        loss = float(np.mean(np.where(absr <= 1.0, resid ** 2, 2.0 * absr - 1.0)))
        dres = np.clip(resid, -1.0, 1.0)
    else:
        loss = float(np.mean(resid ** 2))
        dres = resid
    seed = np.zeros_like(q)
    seed[rows, batch.a] = -2.0 * dres / n
    return loss, backward_recursive(trace, nets.online, seed)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float):
    """Bias-corrected Adam update, in place on ``params``."""
    grads = list(grads)
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ContractViolation("gradient shapes do not match parameter shapes")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def greedy(q) -> int:
    """Index of the largest Q-value, lowest index on ties."""
    return int(np.argmax(q))


def select_action(net: QNetwork, obs, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action. Always consumes one uniform draw so streams stay aligned."""
    if not 0.0 <= epsilon <= 1.0:
        raise ContractViolation("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(net.n_actions))
    q, _ = forward(net, obs)
    return greedy(q)


@dataclass
class Trainer:
    """Stateful training loop; everything needed to resume lives on this object."""

    env: object
    nets: TargetPair
    hp: HyperParams
    seed: int
    hooks: list = field(default_factory=list)
    eval_env: object = None

    def __post_init__(self):
        from .envs import make_env

        if tuple(self.env.observation_shape) != self.nets.online.input_shape:
            raise ContractViolation(
                f"environment observation {self.env.observation_shape} != network input {self.nets.online.input_shape}"
            )
        if self.env.n_actions != self.nets.online.n_actions:
            raise ContractViolation("environment action count differs from network outputs")
        self.rngs = make_streams(self.seed)
        if self.eval_env is None:
            self.eval_env = make_env(self.env.name, **self.env.config())
        self.env.rng = np.random.default_rng(child_seed(self.seed, "env"))
        self.eval_env.rng = self.rngs["eval_env"]
        self.replay = ReplayBuffer(self.hp.replay_capacity)
        self.adam = AdamState.zeros_like(self.nets.online.params)
        self.step = 0
        self.episode = 0
        self.episode_return = 0.0
        self.episode_losses: list[float] = []
        self.obs = None
        self.history: list[dict] = []
        self.best_eval = None

    def emit(self, row):
        self.history.append(row)
        for hook in self.hooks:
            hook(row)

    def _reset_env(self):
        from .envs import preprocess

        self.obs = preprocess(self.env.reset(), self.env.observation_shape)

    def evaluate(self):
        from .envs import evaluate

        return evaluate(self.nets.online, self.eval_env, self.hp.eval_episodes, self.hp.eval_epsilon,
                        self.hp.noop_max, self.rngs["eval"])

    def train_step(self):
        from .envs import preprocess

        hp = self.hp
        if self.obs is None:
            self._reset_env()
        eps = hp.epsilon(self.step)
        a = select_action(self.nets.online, self.obs, eps, self.rngs["policy"])
        raw, r, done = self.env.step(a)
        nxt = preprocess(raw, self.env.observation_shape)
        self.replay.push(Transition(self.obs, a, r, nxt, done))
        self.episode_return += r
        self.obs = nxt
        self.step += 1
        self.nets.steps_since_sync += 1
        if self.step > hp.warmup and len(self.replay) >= hp.batch_size and self.step % hp.train_every == 0:
            batch = self.replay.sample(hp.batch_size, self.rngs["replay"])
            loss, grads = loss_and_grad(batch, self.nets, hp)
            adam_step(self.nets.online.params, grads.grads, self.adam, hp.lr)
            self.episode_losses.append(loss)
        if self.step % hp.target_sync == 0:
            self.nets.sync()
        if done:
            loss = float(np.mean(self.episode_losses)) if self.episode_losses else None
            self.emit({"step": self.step, "episode": self.episode, "return": self.episode_return,
                       "loss": loss, "epsilon": eps, "eval_mean": None})
            self.episode += 1
            self.episode_return = 0.0
            self.episode_losses = []
            self.obs = None
        if hp.eval_interval and self.step % hp.eval_interval == 0:
            res = self.evaluate()
            self.best_eval = res.mean if self.best_eval is None else max(self.best_eval, res.mean)
            log.info("step %d eval mean %.3f", self.step, res.mean)
            self.emit({"step": self.step, "episode": self.episode, "return": None, "loss": None,
                       "epsilon": eps, "eval_mean": res.mean})
            return res.mean
        return None

    def run(self, until_step=None, callback=None) -> list[dict]:
        """Train until ``until_step`` (default ``hp.total_steps``) or the target eval return is hit."""
        until = self.hp.total_steps if until_step is None else until_step
        while self.step < until:
            ev = self.train_step()
            if callback is not None:
                callback(self)
            if ev is not None and self.hp.target_return is not None and ev >= self.hp.target_return:
                break
        return self.history


    # --- checkpointing ---------------------------------------------------

    def checkpoint_state(self) -> CheckpointState:
        tensors = {}
        for k, w in enumerate(self.nets.online.params):
            tensors[f"online.{k}"] = w
        for k, w in enumerate(self.nets.target.params):
            tensors[f"target.{k}"] = w
        for k, (m, v) in enumerate(zip(self.adam.m, self.adam.v)):
            tensors[f"adam.m.{k}"] = m
            tensors[f"adam.v.{k}"] = v
        if len(self.replay):
            idx = self.replay.ordered_indices()
            tensors["replay.s"] = self.replay.s[idx]
            tensors["replay.a"] = self.replay.a[idx]
            tensors["replay.r"] = self.replay.r[idx]
            tensors["replay.s_next"] = self.replay.s_next[idx]
            tensors["replay.done"] = self.replay.done[idx]
        if self.obs is not None:
            tensors["obs"] = self.obs
        meta = {
            "network": self.nets.online.spec_dict(),
            "env": {"name": self.env.name, **self.env.config()},
            "hp": self.hp.to_dict(),
            "seed": self.seed,
            "counters": {
                "step": self.step,
                "episode": self.episode,
                "episode_return": self.episode_return,
                "episode_losses": list(self.episode_losses),
                "steps_since_sync": self.nets.steps_since_sync,
                "adam_t": self.adam.t,
                "best_eval": self.best_eval,
            },
            "rng": {name: g.bit_generator.state for name, g in self.rngs.items()},
            "env_state": self.env.get_state(),
            "eval_env_state": self.eval_env.get_state(),
        }
        return CheckpointState(tensors, meta)

    @classmethod
    def from_checkpoint(cls, state: CheckpointState, hooks=()) -> "Trainer":
        from .envs import make_env

        meta, tensors = state.meta, state.tensors
        env_cfg = dict(meta["env"])
        env = make_env(env_cfg.pop("name"), **env_cfg)
        n_param = sum(1 for L in meta["network"]["layers"] if L["kind"] != "flatten")
        online = QNetwork.from_spec_dict(meta["network"], [tensors[f"online.{k}"].copy() for k in range(n_param)])
        target = online.with_params([tensors[f"target.{k}"].copy() for k in range(n_param)])
        hp = HyperParams(**meta["hp"])
        c = meta["counters"]
        tr = cls(env, TargetPair(online, target, c["steps_since_sync"]), hp, meta["seed"], list(hooks))
        tr.adam = AdamState([tensors[f"adam.m.{k}"].copy() for k in range(n_param)],
                            [tensors[f"adam.v.{k}"].copy() for k in range(n_param)], c["adam_t"])
        if "replay.s" in tensors:
            for s, a, r, s2, d in zip(tensors["replay.s"], tensors["replay.a"], tensors["replay.r"],
                                      tensors["replay.s_next"], tensors["replay.done"]):
                tr.replay.push(Transition(s, int(a), float(r), s2, bool(d)))
        tr.obs = tensors["obs"].copy() if "obs" in tensors else None
        tr.step, tr.episode = c["step"], c["episode"]
        tr.episode_return, tr.episode_losses = c["episode_return"], list(c["episode_losses"])
        tr.best_eval = c["best_eval"]
        for name, st in meta["rng"].items():
            tr.rngs[name].bit_generator.state = st
        tr.env.set_state(meta["env_state"])
        tr.eval_env.set_state(meta["eval_env_state"])
        tr.eval_env.rng = tr.rngs["eval_env"]
        tr.eval_env.set_rng_state(meta["rng"]["eval_env"])
        return tr


def train(env, nets: TargetPair, hp: HyperParams, seed: int, hooks=()):
    """Run ``hp.total_steps`` of deep Q-learning and return the metrics history."""
    return Trainer(env, nets, hp, seed, list(hooks)).run()
