"""Desk-scale deterministic environments, observation preprocessing and evaluation.

Both environments reserve action 0 as the no-op ("do nothing") so the
random no-op start protocol applies to them unchanged. Observations are
single-channel images already in [0, 1].
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


class _Env:
    name = ""
    n_actions = 0
    observation_shape: tuple[int, ...] = ()

    def __init__(self, seed=None):
        self.rng = np.random.default_rng(seed)
        self.done = True

    def _check_action(self, action):
        if self.done:
            raise ContractViolation(f"{self.name}: step() called on a finished episode; call reset() first")
        if not (0 <= int(action) < self.n_actions) or int(action) != action:
            raise ContractViolation(f"{self.name}: invalid action {action!r} (have {self.n_actions})")
        return int(action)

    def rng_state(self):
        return self.rng.bit_generator.state

    def set_rng_state(self, state):
        self.rng.bit_generator.state = state


class CatchEnv(_Env):
    """A ball falls straight down one row per step; move the paddle under it.

    Actions: 0 stay, 1 left, 2 right. The paddle starts in column ``width // 2``
    on the bottom row and the ball in a uniformly random column of the top row.
    Episodes last exactly ``height - 1`` steps and pay +1 for a catch, -1 for a miss.
    """

    name = "catch"
    n_actions = 3

    def __init__(self, width=10, height=10, seed=None):
        if width < 1 or height < 2:
            raise ContractViolation("catch needs width >= 1 and height >= 2")
        super().__init__(seed)
        self.width, self.height = int(width), int(height)
        self.observation_shape = (1, self.height, self.width)
        self.ball_row = self.ball_col = self.paddle = 0

    def config(self):
        return {"width": self.width, "height": self.height}

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.ball_row = 0
        self.ball_col = int(self.rng.integers(self.width))
        self.paddle = self.width // 2
        self.done = False
        return self.observe()

    def observe(self):
        obs = np.zeros(self.observation_shape, dtype=np.float32)
        obs[0, self.ball_row, self.ball_col] = 1.0
        obs[0, self.height - 1, self.paddle] = 1.0
        return obs

    def step(self, action):
        action = self._check_action(action)
        move = (0, -1, 1)[action]
        self.paddle = min(max(self.paddle + move, 0), self.width - 1)
        self.ball_row += 1
        reward = 0.0
        if self.ball_row == self.height - 1:
            self.done = True
            reward = 1.0 if self.ball_col == self.paddle else -1.0
        return self.observe(), reward, self.done

    def get_state(self):
        return {"ball_row": self.ball_row, "ball_col": self.ball_col, "paddle": self.paddle,
                "done": self.done, "rng": self.rng_state()}

    def set_state(self, st):
        self.ball_row, self.ball_col, self.paddle = st["ball_row"], st["ball_col"], st["paddle"]
        self.done = st["done"]
        self.set_rng_state(st["rng"])


class GridWorldEnv(_Env):
    """Walk from ``start`` to ``goal`` on an N x N grid.

    Actions: 0 stay, 1 up, 2 down, 3 left, 4 right (moves off the grid are
    clipped). Each step costs 0.01; the step that reaches the goal pays +1
    instead and ends the episode. Episodes are cut at ``max_steps``.
    Observation: agent cell 1.0, goal cell 0.5.
    """

    name = "gridworld"
    n_actions = 5
    STEP_REWARD = -0.01
    GOAL_REWARD = 1.0

    def __init__(self, size=5, start=(0, 0), goal=None, max_steps=50, seed=None):
        super().__init__(seed)
        self.size = int(size)
        self.start = tuple(start)
        self.goal = tuple(goal) if goal is not None else (self.size - 1, self.size - 1)
        for cell in (self.start, self.goal):
            if not all(0 <= c < self.size for c in cell):
                raise ContractViolation(f"cell {cell} outside a {self.size}x{self.size} grid")
        if self.start == self.goal:
            raise ContractViolation("start and goal must differ")
        self.max_steps = int(max_steps)
        self.observation_shape = (1, self.size, self.size)
        self.pos = self.start
        self.t = 0

    def config(self):
        return {"size": self.size, "start": list(self.start), "goal": list(self.goal), "max_steps": self.max_steps}

    def optimal_return(self) -> float:
        d = abs(self.goal[0] - self.start[0]) + abs(self.goal[1] - self.start[1])
        if d > self.max_steps:
            return self.STEP_REWARD * self.max_steps
        return self.GOAL_REWARD + self.STEP_REWARD * (d - 1)

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.pos = self.start
        self.t = 0
        self.done = False
        return self.observe()

    def observe(self):
        obs = np.zeros(self.observation_shape, dtype=np.float32)
        obs[0][self.goal] = 0.5
        obs[0][self.pos] = 1.0
        return obs

    def step(self, action):
        action = self._check_action(action)
        dr, dc = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))[action]
        r = min(max(self.pos[0] + dr, 0), self.size - 1)
        c = min(max(self.pos[1] + dc, 0), self.size - 1)
        self.pos = (r, c)
        self.t += 1
        if self.pos == self.goal:
            self.done = True
            return self.observe(), self.GOAL_REWARD, True
        self.done = self.t >= self.max_steps
        return self.observe(), self.STEP_REWARD, self.done

    def get_state(self):
        return {"pos": list(self.pos), "t": self.t, "done": self.done, "rng": self.rng_state()}

    def set_state(self, st):
        self.pos, self.t, self.done = tuple(st["pos"]), st["t"], st["done"]
        self.set_rng_state(st["rng"])


ENVIRONMENTS = {"catch": CatchEnv, "gridworld": GridWorldEnv}


def make_env(name: str, seed=None, **kwargs):
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ContractViolation(f"unknown environment {name!r}; registered: {sorted(ENVIRONMENTS)}") from None
    return cls(seed=seed, **kwargs)


def preprocess(obs, shape) -> np.ndarray:
    """Convert a raw observation of registered ``shape`` to a float32 network input in [0, 1].

    uint8 frames are divided by 255; float frames are clipped.
    """
    obs = np.asarray(obs)
    if obs.shape != tuple(shape):
        raise ContractViolation(f"observation shape {obs.shape} is not the registered shape {tuple(shape)}")
    if obs.dtype == np.uint8:
        return obs.astype(np.float32) / 255.0
    return np.clip(obs.astype(np.float32, copy=False), 0.0, 1.0)


class FrameStack:
    """Keep the last ``k`` preprocessed frames stacked along the channel axis."""

    def __init__(self, k: int):
        if k < 1:
            raise ContractViolation("frame stack depth must be >= 1")
        self.k = k
        self.frames = deque(maxlen=k)

    def reset(self, frame):
        self.frames.clear()
        for _ in range(self.k):
            self.frames.append(frame)
        return self.stacked()

    def push(self, frame):
        self.frames.append(frame)
        return self.stacked()

    def stacked(self):
        return np.concatenate(list(self.frames), axis=0)


@dataclass
class EvalResult:
    mean: float
    returns: list[float]


def run_episode(env, act, noop_max, rng):
    """Play one episode: random no-op start, then ``act(obs)`` until done.

    The no-op count k is drawn uniformly from [0, noop_max]. If the episode
    terminates during the no-op phase the environment is simply reset, as the
    usual no-op reset wrapper does; rewards collected there are discarded.
    """
    obs = env.reset()
    for _ in range(int(rng.integers(0, noop_max + 1)) if noop_max > 0 else 0):
        obs, _, done = env.step(0)
        if done:
            obs = env.reset()
    total, done = 0.0, False
    while not done:
        obs, r, done = env.step(act(obs))
        total += r
    return total


def evaluate(net, env, episodes, eval_epsilon=0.05, noop_max=30, rng=None, transform=None) -> EvalResult:
    """Mean undiscounted return of the epsilon-greedy policy over ``episodes`` episodes.

    ``transform`` (optional) maps each preprocessed observation to the input
    actually shown to the network, e.g. an adversarial perturbation.
    """
    from .qlearn import select_action

    if episodes < 1:
        raise ContractViolation("evaluate needs at least one episode")
    rng = rng if rng is not None else np.random.default_rng()

    def act(obs):
        x = preprocess(obs, env.observation_shape)
        if transform is not None:
            x = transform(x)
        return select_action(net, x, eval_epsilon, rng)

    returns = [run_episode(env, act, noop_max, rng) for _ in range(episodes)]
    return EvalResult(float(np.mean(returns)), returns)
