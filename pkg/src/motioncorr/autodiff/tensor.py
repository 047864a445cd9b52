"""Tensor node and reverse-mode graph traversal."""

import contextlib

import numpy as np

from ..errors import NumericalError

_state = {"grad_enabled": True, "debug": False, "branches": None}


class GraphError(RuntimeError):
    """Misuse of a recorded graph, e.g. a second ``backward`` on the same loss."""


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def debug_checks(enabled=True):
    """Raise ``NumericalError`` as soon as any op produces NaN/Inf."""
    prev = _state["debug"]
    _state["debug"] = enabled
    try:
        yield
    finally:
        _state["debug"] = prev


@contextlib.contextmanager
def branch_log():
    """Collect the discrete choices (ReLU masks, argmax indices) made by ops.

    Two evaluations with equal logs lie on the same smooth piece of a
    piecewise-smooth function.
    """
    prev = _state["branches"]
    log = []
    _state["branches"] = log
    try:
        yield log
    finally:
        _state["branches"] = prev


def record_branch(choice):
    log = _state["branches"]
    if log is not None:
        log.append(np.asarray(choice).tobytes())


class Tensor:
    """Dense array that remembers how it was produced.

    ``data`` is a float32 or float64 numpy array; ops keep the dtype of their
    inputs, which is how 64-bit gradient checks are run.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def __add__(self, other):
        from .ops import add

        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from .ops import mul

        return mul(self, other)

    __rmul__ = __mul__

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        backward(self, grad)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data, parents, backward_fn, op):
    """Wrap an op output; record the backward closure only when needed."""
    out = Tensor(data)
    if _state["debug"] and not np.all(np.isfinite(out.data)):
        raise NumericalError(f"non-finite output from {op}")
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, grad=None):
    if loss._consumed:
        raise GraphError("backward already ran on this graph; record a new forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    if grad is None:
        if loss.data.size != 1:
            raise GraphError("grad must be given for non-scalar outputs")
        grad = np.ones_like(loss.data)
    order = _topo_order(loss)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            # leaf
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
    loss._consumed = True
