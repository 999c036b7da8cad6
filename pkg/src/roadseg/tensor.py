"""Dense tensors with tape-based reverse-mode differentiation.

Tensors are flat, row-major, dense numpy arrays in one of two element
widths (float32 for training, float64 for gradient checking). Operations
record their backward rules onto the innermost active :class:`Tape`;
calling :func:`backward` on a scalar loss replays the tape in reverse.
There are no views, no strides, no rich broadcasting: only scalar-vs-
tensor and equal-shape elementwise combinations are supported.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Shapes of operands are incompatible."""


class DomainError(ValueError):
    """An argument is outside the operation's domain."""


class StateError(RuntimeError):
    """Operation invoked in an invalid state (e.g. backward without a tape)."""


class ConfigError(ValueError):
    """A configuration object fails validation."""


_WIDTHS = (np.float32, np.float64)


class Tensor:
    """Dense n-d array with an optional gradient slot.

    The element width is fixed at creation and never changes. ``grad``
    is populated by :func:`backward` for every tensor with
    ``requires_grad`` reachable from the loss.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _WIDTHS:
                dtype = data.dtype
            else:
                dtype = np.float32
        if np.dtype(dtype) not in _WIDTHS:
            raise DomainError(f"unsupported element width: {dtype}")
        # note: np.ascontiguousarray would promote 0-d arrays to 1-d
        self.data = np.array(data, dtype=dtype, order="C", copy=None)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise DimensionError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; implementations live in roadseg.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


class Node:
    """One recorded operation: inputs, output, and its local backward rule."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward pass.

    A tape is confined to a single thread for its lifetime; distinct
    tapes over distinct tensors may run concurrently.
    """

    def __init__(self):
        self.nodes = []
        self.spent = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Tape] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(output, inputs, backward_fn):
    """Attach a backward rule to ``output`` if a tape is recording.

    ``inputs`` contains only Tensor operands; ``backward_fn(g)`` must
    return one gradient array (or None) per input, in order.
    """
    tape = active_tape()
    if tape is None:
        return output
    if not any(t.requires_grad for t in inputs):
        return output
    output.requires_grad = True
    node = Node(tuple(inputs), output, backward_fn)
    output.node = node
    tape.nodes.append(node)
    return output


def backward(loss):
    """Populate ``grad`` on every requiring tensor reachable from ``loss``.

    The loss must be scalar and produced under a recording tape; a tape
    can be consumed by backward only once.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise DimensionError("loss must be scalar")
    tape = active_tape()
    if tape is None:
        raise StateError("backward requires a recording tape")
    if tape.spent:
        raise StateError("backward already called on this tape")
    tape.spent = True

    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        holders.pop(id(node.output), None)
        if g is None:
            continue
        out = node.output
        if out.requires_grad:
            out.grad = g if out.grad is None else out.grad + g
        input_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                gi = gi.reshape(t.data.shape)
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            holders[key] = t
    # whatever remains belongs to leaves (or the loss itself, if a leaf)
    for key, g in grads.items():
        t = holders[key]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


def grad_check(f, x, h=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued and ``x`` 64-bit. Relative error per
    coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if x.dtype != np.float64:
        raise DomainError("grad_check requires a float64 tensor")
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    with Tape():
        y = f(probe)
        if y.data.size != 1:
            raise DimensionError("grad_check requires a scalar-valued f")
        backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    analytic = analytic.reshape(-1)

    base = x.data.reshape(-1).copy()
    numeric = np.zeros_like(base)
    for i in range(base.size):
        bump = base.copy()
        bump[i] = base[i] + h
        fp = f(Tensor(bump.reshape(x.shape), dtype=np.float64)).item()
        bump[i] = base[i] - h
        fm = f(Tensor(bump.reshape(x.shape), dtype=np.float64)).item()
        numeric[i] = (fp - fm) / (2.0 * h)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
