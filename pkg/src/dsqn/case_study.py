"""Single LIF neuron feeding a single LI neuron, driven by a constant current.

Sweeping the current shows how each decoder reads the LI voltage: the last
voltage is not monotone in the input (an earlier spike has more time to leak
away), while the maximum voltage is.
"""
from __future__ import annotations

import numpy as np

from .network import Dense, QNetwork, decode, forward
from .neuron import NeuronConfig


def micro_network(T=8, tau=2.0, v_reset=0.0, v_threshold=1.0, w1=1.0, w2=1.0, decoder="max_mem", dtype=np.float64):
    cfg = NeuronConfig(tau=tau, v_threshold=v_threshold, v_reset=v_reset)
    layers = (Dense(1, 1, "lif", cfg), Dense(1, 1, "li", cfg))
    params = [np.full((1, 1), w1, dtype=dtype), np.full((1, 1), w2, dtype=dtype)]
    return QNetwork(layers, params, (1,), sim_steps=T, decoder=decoder)


def sweep(currents, **kwargs) -> np.ndarray:
    """Rows of (I, last_mem, max_mem, mean_mem), one per input current."""
    net = micro_network(**kwargs)
    currents = np.asarray(currents, dtype=np.float64)
    _, trace = forward(net, currents[:, None])
    hist = trace.history[..., 0]  # (T, n_currents)
    cols = [decode(hist, kind)[0] for kind in ("last_mem", "max_mem", "mean_mem")]
    return np.column_stack([currents] + cols)
