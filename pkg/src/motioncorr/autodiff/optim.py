"""Adam with bias correction and the exponential learning-rate decay."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        state = cls(**kw)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(params, grads, state, lr):
    """Update ``params`` (name -> ndarray) in place; missing grads count as zero."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return params


def lr_schedule(epoch, lr0=1e-3, total=50):
    """``lr0 * 10 ** (-epoch / (total - 1))``: lr0 at the first epoch, lr0/10 at the last."""
    if total <= 1:
        return lr0
    return lr0 * 10.0 ** (-epoch / (total - 1))
