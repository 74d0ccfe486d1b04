"""Discrete-time leaky integrate-and-fire (LIF) and leaky integrate (LI) neurons.

Both models share the charging function

    f(v, x) = v + (1 / tau) * (x - (v - v_reset))

LIF neurons then fire when the charged voltage reaches threshold and reset to
``v_reset``; LI neurons never fire, so their voltage is just ``f(v, x)``.
All functions are elementwise and accept arbitrary leading batch dimensions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class NeuronConfig:
    """Membrane constants for one neuronal layer.

    Attributes:
        tau: membrane time constant, must exceed 1 so the leak factor is in (0, 1).
        v_threshold: firing threshold. Ignored by LI neurons.
        v_reset: rest/reset voltage; also the initial voltage.
    """

    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0

    def __post_init__(self):
        if not (self.tau > 1.0) or not math.isfinite(self.tau):
            raise ContractViolation(f"tau must be a finite value > 1, got {self.tau}")
        if not math.isfinite(self.v_reset):
            raise ContractViolation("v_reset must be finite")
        if not (self.v_threshold > self.v_reset):
            raise ContractViolation(
                f"v_threshold ({self.v_threshold}) must exceed v_reset ({self.v_reset})"
            )

    @property
    def inv_tau(self) -> float:
        return 1.0 / self.tau

    @property
    def leak(self) -> float:
        """Per-step decay factor ``1 - 1/tau``."""
        return 1.0 - 1.0 / self.tau


@dataclass(frozen=True)
class NeuronState:
    """Membrane state after one step: post-reset voltage ``v``, pre-reset ``h``, spikes ``s``."""

    v: np.ndarray
    h: np.ndarray
    s: np.ndarray

    @classmethod
    def initial(cls, shape, cfg: NeuronConfig, dtype=np.float64) -> "NeuronState":
        v = np.full(shape, cfg.v_reset, dtype=dtype)
        return cls(v=v, h=v.copy(), s=np.zeros(shape, dtype=dtype))


def heaviside(x):
    """Step function with the convention heaviside(0) == 1."""
    x = np.asarray(x)
    return (x >= 0).astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)


def charge(v, x, cfg: NeuronConfig):
    """Leaky integration of input ``x`` starting from voltage ``v``."""
    return v + cfg.inv_tau * (x - (v - cfg.v_reset))


def _check_shapes(state: NeuronState, x) -> np.ndarray:
    x = np.asarray(x)
    if np.shape(state.v) != x.shape:
        raise ContractViolation(
            f"input shape {x.shape} does not match neuron state shape {np.shape(state.v)}"
        )
    return x


def lif_step(state: NeuronState, x, cfg: NeuronConfig) -> NeuronState:
    """Advance LIF neurons one step: charge, fire, reset."""
    x = _check_shapes(state, x)
    h = charge(state.v, x, cfg)
    s = heaviside(h - cfg.v_threshold)
    v = h * (1 - s) + cfg.v_reset * s
    return NeuronState(v=v, h=h, s=s)


def li_step(state: NeuronState, x, cfg: NeuronConfig) -> NeuronState:
    """Advance non-spiking LI neurons one step. ``h`` equals ``v`` and ``s`` is always zero."""
    x = _check_shapes(state, x)
    v = charge(state.v, x, cfg)
    return NeuronState(v=v, h=v, s=np.zeros_like(v))
