"""Layer-wise backpropagation through time for the spiking Q-network.

The pass walks the layers from the output down. For each layer it runs a
backward-in-time recursion on the membrane quantities, then pushes the
resulting input-current gradient through the synapse:

* LI output layer: ``dQ/dX_t = (1/tau) * sum_{u >= t} (1 - 1/tau)^(u - t) * dQ/dV_u``.
  For max_mem the only nonzero ``dQ/dV_u`` is at the recorded argmax, so
  steps after it get exactly zero gradient.
* LIF hidden layer::

      dQ/dH_t = dQ/dS_t * sg_t
                + (1 - 1/tau) * dQ/dH_{t+1} * ((1 - S_t) + (V_reset - H_t) * sg_t)

  with ``sg_t = surrogate_grad(H_t - V_th)``. The second factor is the full
  derivative of the reset, so the reset path is not detached.
* ``dQ/dX_t = dQ/dH_t / tau``; weight gradients sum ``dQ/dX_t (x) I_t`` over
  time (and batch), and ``dQ/dI_t = W^T dQ/dX_t`` becomes the spike gradient
  of the layer below.

For a single hidden layer this is literally the textbook recursion; for
deeper stacks it additionally carries the temporal dependence of every
intermediate layer, so it stays an exact derivative of the surrogate graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _kernels
from ..errors import ContractViolation
from ..network import (
    QNetwork,
    VoltageTrace,
    conv2d_grad_input,
    conv2d_grad_weight,
)
from ..surrogate import surrogate_grad


@dataclass
class GradientSet:
    """Per-layer weight gradients plus the seed that produced them.

    ``input_grad`` is the gradient with respect to the observation, shaped
    like the observation passed to ``forward``.
    """

    grads: list[np.ndarray]
    seed: np.ndarray
    input_grad: np.ndarray | None = None

    def __iter__(self):
        return iter(self.grads)

    def __len__(self):
        return len(self.grads)

    def scaled(self, c) -> "GradientSet":
        return GradientSet([g * c for g in self.grads], self.seed * c, None if self.input_grad is None else self.input_grad * c)


def check_trace(trace: VoltageTrace, net: QNetwork, seed) -> np.ndarray:
    """Validate that ``trace`` came from ``net`` and return the seed with a batch axis."""
    specs = net.param_layers
    if len(trace.records) != len(specs) or any(r.spec != sp for r, sp in zip(trace.records, specs)):
        raise ContractViolation("trace was not produced by this network's layer stack")
    if trace.sim_steps != net.sim_steps or trace.decoder != net.decoder:
        raise ContractViolation("trace simulation length or decoder differs from the network")
    seed = np.asarray(seed, dtype=trace.history.dtype)
    want = trace.q.shape
    if not trace.batched:
        if seed.shape != want[1:]:
            raise ContractViolation(f"seed shape {seed.shape} != q shape {want[1:]}")
        seed = seed[None]
    elif seed.shape != want:
        raise ContractViolation(f"seed shape {seed.shape} != q shape {want}")
    return seed


def output_voltage_seed(trace: VoltageTrace, seed) -> np.ndarray:
    """Spread dL/dQ over the LI voltage history according to the decoder."""
    T = trace.sim_steps
    dv = np.zeros_like(trace.history)
    if trace.decoder == "max_mem":
        np.put_along_axis(dv, trace.t_max[None], seed[None], axis=0)
    elif trace.decoder == "mean_mem":
        dv[:] = seed / T
    else:
        dv[T - 1] = seed
    return dv


def _li_backward(dv, cfg):
    dx = np.empty_like(dv)
    T = dv.shape[0]
    dt = dv.dtype.type
    _kernels.li_backward(np.ascontiguousarray(dv).reshape(T, -1), dt(cfg.inv_tau), dx.reshape(T, -1))
    return dx


def _lif_backward_numpy(ds, rec, cfg, surrogate_fn):
    leak = cfg.leak
    dx = np.empty_like(ds)
    dh_next = np.zeros_like(ds[0])
    for t in range(ds.shape[0] - 1, -1, -1):
        h, s = rec.h[t], rec.s[t]
        sg = surrogate_fn(h - cfg.v_threshold)
        dv_dh = (1 - s) + (cfg.v_reset - h) * sg
        dh = ds[t] * sg + leak * dh_next * dv_dh
        dx[t] = dh * cfg.inv_tau
        dh_next = dh
    return dx


def _lif_backward(ds, rec, cfg, surrogate_fn=None):
    if surrogate_fn is not None:
        return _lif_backward_numpy(ds, rec, cfg, surrogate_fn)
    dx = np.empty_like(ds)
    T = ds.shape[0]
    dt = ds.dtype.type
    _kernels.lif_backward(
        np.ascontiguousarray(ds).reshape(T, -1),
        rec.h.reshape(T, -1),
        rec.s.reshape(T, -1),
        dt(cfg.inv_tau), dt(cfg.v_threshold), dt(cfg.v_reset), dt(np.pi),
        dx.reshape(T, -1),
    )
    return dx


def _synapse_backward(rec, w, dx, need_input):
    """Weight gradient and (optionally) input gradient for one synaptic layer."""
    sp = rec.spec
    T = dx.shape[0]
    if rec.static:
        # identical input at every step: sum the current gradient over time first
        dx_eff = dx.sum(axis=0)
        inp = rec.inp
    else:
        dx_eff = dx.reshape((-1,) + dx.shape[2:])
        inp = rec.inp.reshape((-1,) + rec.inp.shape[2:])
    if sp.kind == "dense":
        gw = dx_eff.T @ inp
        gi = dx_eff @ w if need_input else None
    else:
        gw = conv2d_grad_weight(dx_eff, inp, sp.kernel, sp.stride)
        gi = conv2d_grad_input(dx_eff, w, inp.shape[2:], sp.stride) if need_input else None
    if gi is not None and not rec.static:
        gi = gi.reshape((T,) + rec.inp.shape[1:])
    return gw, gi


def backward_recursive(
    trace: VoltageTrace, net: QNetwork, seed, input_grad: bool = False, surrogate_fn=None
) -> GradientSet:
    """Gradients of ``sum(seed * Q)`` with respect to every weight array.

    ``seed`` has the shape of the ``q`` returned by ``forward``. Set
    ``input_grad`` to also get the gradient with respect to the observation.
    ``surrogate_fn`` swaps in a different spike derivative (default: the
    arctan surrogate, evaluated inside the compiled kernel).
    """
    seed_b = check_trace(trace, net, seed)
    records = trace.records
    grads = [None] * len(records)
    d_out = output_voltage_seed(trace, seed_b)
    gi = None
    for k in range(len(records) - 1, -1, -1):
        rec = records[k]
        cfg = rec.spec.cfg
        if k == len(records) - 1:
            dx = _li_backward(d_out, cfg)
        else:
            dx = _lif_backward(d_out, rec, cfg, surrogate_fn)
        need = k > 0 or input_grad
        grads[k], gi = _synapse_backward(rec, net.params[k], dx, need)
        if k > 0:
            # undo any flatten between this layer and the one below
            d_out = gi.reshape(records[k - 1].s.shape)
    in_grad = None
    if input_grad:
        in_grad = gi.reshape(trace.obs.shape)
        if not trace.batched:
            in_grad = in_grad[0]
    return GradientSet(grads, np.asarray(seed), in_grad)
