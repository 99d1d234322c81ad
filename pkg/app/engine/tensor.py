"""Dense tensors and the reverse-mode computation tape."""

import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

from app.core.error_handling import BackwardError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def _local():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.tape = None
        _state.dtype = np.float32
    return _state


def get_default_dtype() -> np.dtype:
    return np.dtype(_local().dtype)


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors"""
    state = _local()
    previous = state.dtype
    state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        state.dtype = previous


def is_grad_enabled() -> bool:
    return _local().grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them on the tape"""
    state = _local()
    previous = state.grad_enabled
    state.grad_enabled = False
    try:
        yield
    finally:
        state.grad_enabled = previous


def check_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values (shape {data.shape})")


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    if grad.shape != shape:
        raise ShapeError(f"cannot reduce gradient of shape {grad.shape} to {shape}")
    return grad


class Tensor:
    """Dense array with an optional gradient buffer"""

    __slots__ = ("data", "grad", "requires_grad", "name", "retains_grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        array = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        check_finite(name or "tensor", array)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.retains_grad = False
        self._node: Optional["TapeNode"] = None

    @classmethod
    def wrap(cls, data: np.ndarray) -> "Tensor":
        """Adopt an op result without copying or casting"""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out.name = None
        out.retains_grad = False
        out._node = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Keep this non-leaf tensor's gradient after backward"""
        self.retains_grad = True
        return self

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + grad.astype(self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; the math lives in app.engine.ops

    def __add__(self, other):
        from app.engine import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from app.engine import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from app.engine import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from app.engine import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from app.engine import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from app.engine import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from app.engine import ops
        return ops.div(self, other)

    def __neg__(self):
        from app.engine import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from app.engine import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from app.engine import ops
        return ops.getitem(self, key)

    def reshape(self, *shape):
        from app.engine import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from app.engine import ops
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        from app.engine import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from app.engine import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Create a trainable leaf tensor"""
    return Tensor(data, requires_grad=True, name=name)


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    tape: "ComputationTape"


class ComputationTape:
    """Ordered record of primitive applications for one forward pass"""

    def __init__(self):
        self.nodes: list = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        if self.consumed:
            raise BackwardError("cannot record on a tape whose backward pass already ran")
        node = TapeNode(op=op, inputs=tuple(inputs), output=output, backward=backward, tape=self)
        output._node = node
        self.nodes.append(node)

    def run_backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise BackwardError(
                "backward already ran on this graph; call reset_tape() and rebuild the forward pass"
            )
        grads = {id(loss): np.ones_like(loss.data)}

        # Recording order is a topological order, so reversing it is a valid reverse pass
        for node in reversed(self.nodes):
            grad = grads.pop(id(node.output), None)
            if grad is None:
                continue
            if node.output.retains_grad:
                node.output.grad = grad.astype(node.output.dtype, copy=True)
            input_grads = node.backward(grad)
            for tensor, input_grad in zip(node.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                input_grad = unbroadcast(input_grad, tensor.shape)
                if tensor.is_leaf:
                    tensor.accumulate_grad(input_grad)
                    continue
                key = id(tensor)
                grads[key] = grads[key] + input_grad if key in grads else input_grad

        self.consumed = True
        self.nodes.clear()


def current_tape() -> ComputationTape:
    """Active tape for this thread, starting a fresh one after a backward pass"""
    state = _local()
    if state.tape is None or state.tape.consumed:
        state.tape = ComputationTape()
    return state.tape


def reset_tape() -> ComputationTape:
    """Drop everything recorded so far and start a new tape"""
    state = _local()
    state.tape = ComputationTape()
    return state.tape


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from a scalar loss"""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise BackwardError("loss is detached: it was not produced by recorded ops")
    loss._node.tape.run_backward(loss)
