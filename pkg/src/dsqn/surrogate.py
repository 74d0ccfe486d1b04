"""Arctangent surrogate for the spike nonlinearity.

The forward pass always uses the hard step; ``surrogate_grad`` stands in for
its derivative during backprop. ``surrogate`` (the smooth primitive) is only
used by the relaxed forward that the finite-difference checker relies on.
"""
import numpy as np

SURROGATES = ("arctan",)


def surrogate(x):
    """Smooth step: arctan(pi*x)/pi + 1/2."""
    return np.arctan(np.pi * x) / np.pi + 0.5


def surrogate_grad(x):
    """Derivative of ``surrogate``: 1 / (1 + (pi*x)^2)."""
    return 1.0 / (1.0 + (np.pi * x) ** 2)
