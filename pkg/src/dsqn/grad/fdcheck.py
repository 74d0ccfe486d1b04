"""Finite-difference checking on a relaxed (fully differentiable) forward.

The hard step makes the real network piecewise constant in its weights, so
finite differences say nothing about the surrogate gradient. Replacing every
spike by the smooth arctan primitive whose derivative *is* the surrogate turns
the network into an honest differentiable function; the analytic recursion
run on that relaxed trace must then agree with central differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation
from ..network import Conv2d, Dense, Flatten, QNetwork, forward, DECODERS
from ..neuron import NeuronConfig
from .recursive import backward_recursive


@dataclass
class MicroCase:
    net: QNetwork
    obs: np.ndarray
    seed: np.ndarray


def random_micro_net(rng: np.random.Generator, max_layers=3, max_width=8, max_steps=8, decoder=None) -> MicroCase:
    """Draw a small float64 network, a batch of observations and a dL/dQ seed.

    About a third of the multi-layer draws start with a tiny conv layer
    (at most ``max_width`` output neurons) followed by a flatten.
    """
    n_param = int(rng.integers(1, max_layers + 1))
    v_reset = float(rng.uniform(-0.3, 0.2))
    cfg = NeuronConfig(
        tau=float(rng.uniform(1.2, 4.0)),
        v_threshold=v_reset + float(rng.uniform(0.3, 1.5)),
        v_reset=v_reset,
    )
    layers = []
    if n_param >= 2 and rng.random() < 0.35:
        c_in = int(rng.integers(1, 3))
        c_out = int(rng.integers(1, 3))
        input_shape = (c_in, 3, 3)
        layers += [Conv2d(c_out, c_in, 2, 1, "lif", cfg), Flatten()]
        width = c_out * 4
        remaining = n_param - 1
    else:
        width = int(rng.integers(1, max_width + 1))
        input_shape = (width,)
        remaining = n_param
    for i in range(remaining):
        last = i == remaining - 1
        n_out = int(rng.integers(1, max_width + 1))
        layers.append(Dense(n_out, width, "li" if last else "lif", cfg))
        width = n_out
    params = []
    for sp in layers:
        if sp.has_params:
            scale = rng.uniform(0.8, 3.0) / np.sqrt(sp.fan_in)
            params.append(rng.normal(0.0, scale, size=sp.weight_shape) + scale * 0.3)
    net = QNetwork(
        tuple(layers),
        params,
        input_shape,
        sim_steps=int(rng.integers(1, max_steps + 1)),
        decoder=decoder or str(rng.choice(DECODERS)),
    )
    batch = int(rng.integers(1, 4))
    obs = rng.uniform(0.0, 1.0, size=(batch,) + input_shape) * rng.uniform(1.0, 3.0)
    seed = rng.normal(size=(batch, net.n_actions))
    return MicroCase(net, obs, seed)


def _objective(net, obs, seed):
    q, _ = forward(net, obs, relaxed=True)
    return float(np.sum(seed * q))


def central_differences(net: QNetwork, obs, seed, h: float) -> list[np.ndarray]:
    """Central-difference gradient of ``sum(seed * Q_relaxed)`` for every weight."""
    out = []
    for k, w in enumerate(net.params):
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + h
            fp = _objective(net, obs, seed)
            w[idx] = orig - h
            fm = _objective(net, obs, seed)
            w[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def relative_errors(analytic, numeric, floor=1e-8) -> float:
    worst = 0.0
    for a, f in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        worst = max(worst, float(np.max(np.abs(a - f) / denom)) if a.size else 0.0)
    return worst


def fd_check_relaxed(net: QNetwork, obs, seed, h: float = 1e-4) -> float:
    """Max relative error between relaxed analytic gradients and central differences.

    Returns ``inf`` when any intermediate value is non-finite.
    """
    if not (1e-6 <= h <= 1e-3):
        raise ContractViolation(f"finite-difference step must be in [1e-6, 1e-3], got {h}")
    if any(w.dtype != np.float64 for w in net.params):
        raise ContractViolation("finite-difference checks require float64 weights")
    with np.errstate(all="ignore"):
        q, trace = forward(net, obs, relaxed=True)
        if not np.all(np.isfinite(trace.history)):
            return float("inf")
        analytic = backward_recursive(trace, net, seed).grads
        numeric = central_differences(net, obs, seed, h)
    if not all(np.all(np.isfinite(g)) for g in analytic + numeric):
        return float("inf")
    return relative_errors(analytic, numeric)
