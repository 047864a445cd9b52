"""Small reverse-mode autodiff engine over numpy arrays."""

from .gradcheck import grad_check
from .ops import *  # noqa: F401,F403
from .ops import __all__ as _ops_all
from .optim import AdamState, adam_step, lr_schedule
from .tensor import GraphError, Tensor, backward, debug_checks, no_grad

__all__ = list(_ops_all) + [
    "AdamState",
    "GraphError",
    "adam_step",
    "backward",
    "debug_checks",
    "grad_check",
    "lr_schedule",
    "no_grad",
]
