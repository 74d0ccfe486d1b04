"""Run configuration stored as a TOML file.

Layout (every table and key is optional; unknown keys are rejected)::

    seed = 1
    out_dir = "runs/catch"
    checkpoint_interval = 50000   # 0 disables periodic checkpoints

    [env]
    name = "catch"                # catch | gridworld
    width = 10                    # any further keys go to the env constructor
    height = 10

    [network]
    arch = "16C3S1-LIF-Flatten-128-LIF-N_A-LI"
    decoder = "max_mem"           # last_mem | max_mem | mean_mem
    sim_steps = 8
    init_gain = 1.0               # weights ~ U(+-gain/sqrt(fan_in))

    [neuron]
    tau = 2.0
    v_threshold = 1.0
    v_reset = 0.0

    [train]                       # fields of qlearn.HyperParams
    lr = 0.001

    [attack]
    epsilon = 0.01
    max_iters = 50
    episodes = 100
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import tomli
import tomli_w

from ..attack import AttackConfig
from ..envs import ENVIRONMENTS
from ..errors import ConfigError, ContractViolation
from ..network import DECODERS, TOY_ARCHITECTURE
from ..neuron import NeuronConfig
from ..qlearn import HyperParams


@dataclass
class RunConfig:
    env: str = "catch"
    env_kwargs: dict = field(default_factory=dict)
    arch: str = TOY_ARCHITECTURE
    decoder: str = "max_mem"
    sim_steps: int = 8
    init_gain: float = 1.0
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    hp: HyperParams = field(default_factory=HyperParams)
    attack: AttackConfig = field(default_factory=AttackConfig)
    attack_episodes: int = 100
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"unknown env {self.env!r}; expected one of {sorted(ENVIRONMENTS)}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"unknown decoder {self.decoder!r}; expected one of {DECODERS}")
        if self.sim_steps < 1:
            raise ConfigError("sim_steps must be positive")
        if not self.init_gain > 0:
            raise ConfigError("init_gain must be positive")
        if self.attack_episodes < 1 or self.checkpoint_interval < 0:
            raise ConfigError("attack.episodes must be >= 1 and checkpoint_interval >= 0")

    def to_dict(self) -> dict:
        train = {k: v for k, v in asdict(self.hp).items() if v is not None}
        attack = {"epsilon": self.attack.epsilon, "max_iters": self.attack.max_iters,
                  "episodes": self.attack_episodes}
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "checkpoint_interval": self.checkpoint_interval,
            "env": {"name": self.env, **self.env_kwargs},
            "network": {"arch": self.arch, "decoder": self.decoder, "sim_steps": self.sim_steps,
                        "init_gain": self.init_gain},
            "neuron": asdict(self.neuron),
            "train": train,
            "attack": attack,
        }


_TOP = {"seed", "out_dir", "checkpoint_interval", "env", "network", "neuron", "train", "attack"}


def _take(table: dict, allowed, where):
    unknown = set(table) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return table


def from_dict(d: dict) -> RunConfig:
    _take(d, _TOP, "top level")
    for key in ("env", "network", "neuron", "train", "attack"):
        if key in d and not isinstance(d[key], dict):
            raise ConfigError(f"[{key}] must be a table")
    env = dict(d.get("env", {}))
    env_name = env.pop("name", "catch")
    net = _take(d.get("network", {}), {"arch", "decoder", "sim_steps", "init_gain"}, "[network]")
    neuron = _take(d.get("neuron", {}), {f.name for f in fields(NeuronConfig)}, "[neuron]")
    train = _take(d.get("train", {}), {f.name for f in fields(HyperParams)}, "[train]")
    attack = dict(_take(d.get("attack", {}), {"epsilon", "max_iters", "episodes"}, "[attack]"))
    episodes = attack.pop("episodes", 100)
    try:
        return RunConfig(
            env=env_name,
            env_kwargs=env,
            arch=net.get("arch", TOY_ARCHITECTURE),
            decoder=net.get("decoder", "max_mem"),
            sim_steps=net.get("sim_steps", 8),
            init_gain=net.get("init_gain", 1.0),
            neuron=NeuronConfig(**neuron),
            hp=HyperParams(**train),
            attack=AttackConfig(**attack),
            attack_episodes=episodes,
            seed=d.get("seed", 0),
            out_dir=d.get("out_dir", "runs/default"),
            checkpoint_interval=d.get("checkpoint_interval", 0),
        )
    except (ContractViolation, TypeError) as e:
        raise ConfigError(str(e)) from e


def parse(text: str) -> RunConfig:
    try:
        return from_dict(tomli.loads(text))
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"malformed config: {e}") from e


def serialize(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def load(path) -> RunConfig:
    with open(path, "rb") as f:
        raw = f.read()
    return parse(raw.decode("utf-8"))
