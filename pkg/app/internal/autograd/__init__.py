from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from app.settings import get_settings


class DimensionError(Exception):
    """Raised when operand shapes do not satisfy a primitive's contract

    Attributes:
        msg -- error message naming the primitive and the offending axes
    """

    def __init__(self, msg="operand shapes do not conform"):
        self.msg = msg
        super().__init__(self.msg)


class ContractError(Exception):
    """Raised when a caller violates a documented precondition

    Attributes:
        msg -- error message
    """

    def __init__(self, msg="precondition violated"):
        self.msg = msg
        super().__init__(self.msg)


class NumericalError(Exception):
    """Raised when a primitive produces NaN or Inf from its inputs

    Attributes:
        msg -- error message naming the primitive
    """

    def __init__(self, msg="non-finite value produced"):
        self.msg = msg
        super().__init__(self.msg)


class KinkProximityError(Exception):
    """Raised by the gradient checker when a ReLU input sits within epsilon of zero

    Attributes:
        msg -- error message
    """

    def __init__(self, msg="ReLU input within epsilon of the kink, resample inputs"):
        self.msg = msg
        super().__init__(self.msg)


DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
}

_precision: ContextVar[Optional[type]] = ContextVar("precision", default=None)


def get_dtype():
    dtype = _precision.get()
    if dtype is None:
        return DTYPES[get_settings().precision]
    return dtype


@contextmanager
def precision(name):
    token = _precision.set(DTYPES[name])
    try:
        yield DTYPES[name]
    finally:
        _precision.reset(token)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.array(data, dtype=dtype or get_dtype())
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __neg__(self):
        return ops.neg(self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __getitem__(self, index):
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable
    # distance of the closest input to a non-differentiable point, if any
    kink: Optional[float] = None


class ComputationRecord:
    """Ordered log of the primitives executed while it was active.

    Execution order is a topological order of the graph, so walking the log
    backwards visits every node after all of its consumers.
    """

    def __init__(self):
        self.nodes = []

    def append(self, node):
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def ops(self):
        return [node.op for node in self.nodes]


_active_record: ContextVar[Optional[ComputationRecord]] = ContextVar("record", default=None)


@contextmanager
def record():
    rec = ComputationRecord()
    token = _active_record.set(rec)
    try:
        yield rec
    finally:
        _active_record.reset(token)


@contextmanager
def no_record():
    token = _active_record.set(None)
    try:
        yield
    finally:
        _active_record.reset(token)


def is_recording():
    return _active_record.get() is not None


def emit(op, data, inputs, backward, kink=None):
    if get_settings().check_finite and not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")

    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.is_leaf = True
    out.name = None

    rec = _active_record.get()
    if rec is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        rec.append(Node(op=op, inputs=tuple(inputs), output=out, backward=backward, kink=kink))
    return out


from . import ops  # noqa: E402
