"""Fused time loops (numba) for the hard forward simulation and the recursive backward.

Inputs are 2-D ``(T, N)`` arrays over flattened neurons; a static input is
passed as a ``(1, N)`` array and reused at every step. All scalar constants
must be passed in the array dtype so float32 work stays float32; the forward
uses the same expression as ``neuron.charge`` and therefore matches the
reference step functions bit for bit.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def lif_forward(x, T, inv_tau, v_th, v_reset, h_out, v_out, s_out):
    n = x.shape[1]
    static = x.shape[0] == 1
    one = inv_tau / inv_tau
    v = np.full(n, v_reset, dtype=x.dtype)
    for t in range(T):
        row = 0 if static else t
        for i in range(n):
            vi = v[i]
            h = vi + inv_tau * (x[row, i] - (vi - v_reset))
            s = one * (h - v_th >= 0)
            vi = h * (one - s) + v_reset * s
            h_out[t, i] = h
            v_out[t, i] = vi
            s_out[t, i] = s
            v[i] = vi


@njit(cache=True)
def li_forward(x, T, inv_tau, v_reset, v_out):
    n = x.shape[1]
    static = x.shape[0] == 1
    v = np.full(n, v_reset, dtype=x.dtype)
    for t in range(T):
        row = 0 if static else t
        for i in range(n):
            vi = v[i]
            vi = vi + inv_tau * (x[row, i] - (vi - v_reset))
            v_out[t, i] = vi
            v[i] = vi


@njit(cache=True)
def lif_backward(ds, h, s, inv_tau, v_th, v_reset, pi, dx):
    T, n = ds.shape
    one = inv_tau / inv_tau
    leak = one - inv_tau
    dh_next = np.zeros(n, dtype=dx.dtype)
    for t in range(T - 1, -1, -1):
        for i in range(n):
            hv = h[t, i]
            z = pi * (hv - v_th)
            sg = one / (one + z * z)
            dv_dh = (one - s[t, i]) + (v_reset - hv) * sg
            dh = ds[t, i] * sg + leak * dh_next[i] * dv_dh
            dx[t, i] = dh * inv_tau
            dh_next[i] = dh


@njit(cache=True)
def li_backward(dv, inv_tau, dx):
    T, n = dv.shape
    leak = inv_tau / inv_tau - inv_tau
    lam = np.zeros(n, dtype=dx.dtype)
    for t in range(T - 1, -1, -1):
        for i in range(n):
            li = dv[t, i] + leak * lam[i]
            dx[t, i] = li * inv_tau
            lam[i] = li
