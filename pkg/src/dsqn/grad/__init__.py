"""Surrogate-gradient machinery: recursive BPTT, a tape-based oracle and a relaxed FD checker."""
from ..surrogate import surrogate, surrogate_grad
from .fdcheck import fd_check_relaxed, random_micro_net
from .recursive import GradientSet, backward_recursive
from .tape import backward_tape

__all__ = [
    "GradientSet",
    "backward_recursive",
    "backward_tape",
    "fd_check_relaxed",
    "random_micro_net",
    "surrogate",
    "surrogate_grad",
]
