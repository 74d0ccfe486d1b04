"""Generic reverse-mode differentiation over the unrolled network graph.

This is the independent oracle for ``backward_recursive``: it knows nothing
about membrane recursions. It re-simulates the network out of primitive ops
(add, mul, matmul, conv, spike, ...) recorded on a Wengert list, then runs a
plain vector-Jacobian sweep backwards over that list. Spike nodes use the
hard step (or the smooth surrogate, for relaxed traces) going forward and the
surrogate derivative going back.
"""
from __future__ import annotations

import numpy as np

from ..network import QNetwork, VoltageTrace
from ..surrogate import surrogate, surrogate_grad
from .recursive import GradientSet, check_trace


class Node:
    __slots__ = ("value", "grad", "parents")

    def __init__(self, value, parents=()):
        self.value = value
        self.grad = None
        self.parents = parents  # sequence of (node, vjp)


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, value, parents=()):
        n = Node(value, tuple(parents))
        self.nodes.append(n)
        return n

    def leaf(self, value):
        return self._push(np.array(value))

    def add(self, a, b):
        return self._push(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])

    def sub(self, a, b):
        return self._push(a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)])

    def mul(self, a, b):
        av, bv = a.value, b.value
        return self._push(av * bv, [(a, lambda g: g * bv), (b, lambda g: g * av)])

    def scale(self, a, c):
        return self._push(a.value * c, [(a, lambda g: g * c)])

    def divide(self, a, c):
        return self._push(a.value / c, [(a, lambda g: g / c)])

    def shift(self, a, c):
        return self._push(a.value + c, [(a, lambda g: g)])

    def one_minus(self, a):
        return self._push(1.0 - a.value, [(a, lambda g: -g)])

    def reshape(self, a, shape):
        old = a.value.shape
        return self._push(a.value.reshape(shape), [(a, lambda g: g.reshape(old))])

    def dense(self, x, w):
        xv, wv = x.value, w.value
        out = np.einsum("...i,oi->...o", xv, wv)

        def vjp_w(g):
            lead = list(range(g.ndim - 1))
            return np.tensordot(g, xv, axes=(lead, lead))

        return self._push(out, [(x, lambda g: np.einsum("...o,oi->...i", g, wv)), (w, vjp_w)])

    def conv(self, x, w, stride):
        xv, wv = x.value, w.value
        n, c, hh, ww = xv.shape
        o, _, k, _ = wv.shape
        oh, ow = (hh - k) // stride + 1, (ww - k) // stride + 1

        def window(p, q):
            return (slice(None), slice(None), slice(p, p + stride * (oh - 1) + 1, stride), slice(q, q + stride * (ow - 1) + 1, stride))

        out = np.zeros((n, o, oh, ow), dtype=np.result_type(xv, wv))
        for p in range(k):
            for q in range(k):
                out += np.einsum("nchw,oc->nohw", xv[window(p, q)], wv[:, :, p, q])

        def vjp_x(g):
            gx = np.zeros_like(xv, dtype=np.result_type(g, wv))
            for p in range(k):
                for q in range(k):
                    gx[window(p, q)] += np.einsum("nohw,oc->nchw", g, wv[:, :, p, q])
            return gx

        def vjp_w(g):
            gw = np.zeros_like(wv, dtype=np.result_type(g, xv))
            for p in range(k):
                for q in range(k):
                    gw[:, :, p, q] = np.einsum("nohw,nchw->oc", g, xv[window(p, q)])
            return gw

        return self._push(out, [(x, vjp_x), (w, vjp_w)])

    def spike(self, a, relaxed):
        av = a.value
        out = surrogate(av) if relaxed else np.where(av >= 0, 1.0, 0.0).astype(av.dtype)
        return self._push(out, [(a, lambda g: g * surrogate_grad(av))])

    def stack(self, nodes):
        out = np.stack([nd.value for nd in nodes])
        return self._push(out, [(nd, (lambda g, i=i: g[i])) for i, nd in enumerate(nodes)])

    def time_max(self, a):
        av = a.value
        idx = np.argmax(av, axis=0)
        out = np.take_along_axis(av, idx[None], axis=0)[0]

        def vjp(g):
            full = np.zeros_like(av)
            np.put_along_axis(full, idx[None], g[None], axis=0)
            return full

        return self._push(out, [(a, vjp)])

    def time_mean(self, a):
        av = a.value
        return self._push(av.mean(axis=0), [(a, lambda g: np.broadcast_to(g / av.shape[0], av.shape))])

    def time_last(self, a):
        av = a.value

        def vjp(g):
            full = np.zeros_like(av)
            full[-1] = g
            return full

        return self._push(av[-1], [(a, vjp)])

    def backward(self, out, seed):
        out.grad = np.array(seed, dtype=out.value.dtype)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            for parent, vjp in node.parents:
                g = vjp(node.grad)
                parent.grad = g if parent.grad is None else parent.grad + g


def tape_forward(net: QNetwork, obs, relaxed=False):
    """Build the unrolled graph for a batch ``obs`` of shape (B, *input_shape).

    Returns ``(tape, q_node, obs_node, weight_nodes)``.
    """
    tape = Tape()
    x_in = tape.leaf(obs)
    weights = [tape.leaf(w) for w in net.params]
    T = net.sim_steps
    seq = [x_in] * T
    wi = 0
    for sp in net.layers:
        if sp.kind == "flatten":
            seq = [tape.reshape(nd, nd.value.shape[:1] + (-1,)) for nd in seq]
            continue
        w = weights[wi]
        wi += 1
        if sp.kind == "dense":
            xs = [tape.dense(nd, w) for nd in seq]
        else:
            xs = [tape.conv(nd, w, sp.stride) for nd in seq]
        cfg = sp.cfg
        v = tape.leaf(np.full(xs[0].value.shape, cfg.v_reset, dtype=xs[0].value.dtype))
        outs = []
        for t in range(T):
            # v + (1/tau) * (x - (v - v_reset))
            drive = tape.sub(xs[t], tape.shift(v, -cfg.v_reset))
            h = tape.add(v, tape.scale(drive, cfg.inv_tau))
            if sp.neuron == "lif":
                s = tape.spike(tape.shift(h, -cfg.v_threshold), relaxed)
                v = tape.add(tape.mul(h, tape.one_minus(s)), tape.scale(s, cfg.v_reset))
                outs.append(s)
            else:
                v = h
                outs.append(v)
        seq = outs
    hist = tape.stack(seq)
    if net.decoder == "max_mem":
        q = tape.time_max(hist)
    elif net.decoder == "mean_mem":
        q = tape.time_mean(hist)
    else:
        q = tape.time_last(hist)
    return tape, q, x_in, weights


def backward_tape(trace: VoltageTrace, net: QNetwork, seed) -> GradientSet:
    """Same contract as ``backward_recursive``, computed by generic reverse-mode accumulation."""
    seed_b = check_trace(trace, net, seed)
    tape, q, x_in, weights = tape_forward(net, trace.obs, relaxed=trace.relaxed)
    tape.backward(q, seed_b)
    grads = [np.zeros_like(w.value) if w.grad is None else np.asarray(w.grad) for w in weights]
    gin = np.zeros_like(x_in.value) if x_in.grad is None else np.asarray(x_in.grad)
    if not trace.batched:
        gin = gin[0]
    return GradientSet(grads, np.asarray(seed), gin)
