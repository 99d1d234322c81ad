"""Differentiable primitives over Tensor.

Reductions accumulate in float64 and cast back to the operand dtype.
"""

import math
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import erf, expit

from app.core.error_handling import ContractError, ShapeError
from app.engine.tensor import Tensor, check_finite, current_tape, is_grad_enabled

Operand = Union[Tensor, np.ndarray, float, int]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    check_finite(op, data)
    out = Tensor.wrap(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(op, inputs, out, backward)
    return out


def _pair(a: Operand, b: Operand):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _result_dtype(*tensors: Tensor) -> np.dtype:
    return np.result_type(*(t.dtype for t in tensors))


# --- elementwise -----------------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        raise ContractError("division by zero")

    def backward(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return _emit("div", a.data / b.data, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ContractError("log of a non-positive value")
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _emit("relu", x.data * active, (x,), lambda g: (g * active,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU"""
    x64 = x.data.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(x64 * _INV_SQRT2))
    out = (x64 * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x64 * x64)
        return ((g * (cdf + x64 * pdf)).astype(x.dtype),)

    return _emit("gelu", out, (x,), backward)


def sigmoid(x: Tensor) -> np.ndarray:
    """Probabilities for reporting; not recorded on the tape"""
    return expit(x.data.astype(np.float64))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity outside training"""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ContractError("dropout in training mode needs a seeded generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _emit("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# --- linear algebra ---------------------------------------------------------

def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            # fold batch dims into rows so the weight gradient is one product
            grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return grad_a, grad_b

    return _emit("matmul", np.matmul(a.data, b.data), (a, b), backward)


# --- reductions -------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims)).astype(x.dtype)
    return _emit("sum", out, (x,), lambda g: (_expand(g, x.shape, axis, keepdims),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    if count == 0:
        raise ShapeError(f"mean over an empty axis of shape {x.shape}")
    out = np.asarray(x.data.mean(axis=axis, dtype=np.float64, keepdims=keepdims)).astype(x.dtype)
    return _emit("mean", out, (x,), lambda g: (_expand(g / count, x.shape, axis, keepdims),))


def order_invariant_mean(x: Tensor, axis: int) -> Tensor:
    """Mean that sums values in sorted order, so permuting along axis is bit-exact"""
    count = x.shape[axis]
    if count == 0:
        raise ShapeError(f"mean over an empty axis of shape {x.shape}")
    ordered = np.sort(x.data.astype(np.float64), axis=axis)
    out = (ordered.sum(axis=axis) / count).astype(x.dtype)
    return _emit("order_invariant_mean", out, (x,), lambda g: (_expand(g / count, x.shape, axis, False),))


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax needs a non-empty last dimension, got shape {x.shape}")
    shifted = x.data.astype(np.float64) - x.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    y64 = exp / exp.sum(axis=-1, keepdims=True)

    def backward(g):
        g64 = g.astype(np.float64)
        return ((y64 * (g64 - (g64 * y64).sum(axis=-1, keepdims=True))).astype(x.dtype),)

    return _emit("softmax", y64.astype(x.dtype), (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"layer_norm needs a non-empty last dimension, got shape {x.shape}")
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match width {width}")
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")

    x64 = x.data.astype(np.float64)
    centered = x64 - x64.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    dtype = _result_dtype(x, gain, bias)
    out = (x_hat * gain.data.astype(np.float64) + bias.data.astype(np.float64)).astype(dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        d_xhat = g64 * gain.data.astype(np.float64)
        grad_x = inv_std / width * (
            width * d_xhat
            - d_xhat.sum(axis=-1, keepdims=True)
            - x_hat * (d_xhat * x_hat).sum(axis=-1, keepdims=True)
        )
        grad_gain = (g64 * x_hat).reshape(-1, width).sum(axis=0)
        grad_bias = g64.reshape(-1, width).sum(axis=0)
        return grad_x.astype(x.dtype), grad_gain.astype(gain.dtype), grad_bias.astype(bias.dtype)

    return _emit("layer_norm", out, (x, gain, bias), backward)


# --- shape ops --------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat along axis {axis} failed for shapes {shapes}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tensors, backward)


def take(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0 (embedding lookup, record repetition)"""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise ShapeError(f"take: index out of range for axis of size {x.shape[0]}")

    def backward(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(grad, indices, g)
        return (grad,)

    return _emit("take", x.data[indices], (x,), backward)


def getitem(x: Tensor, key) -> Tensor:
    def backward(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(grad, key, g)
        return (grad,)

    return _emit("getitem", np.array(x.data[key]), (x,), backward)


# --- losses -----------------------------------------------------------------

def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy in the stable logit form"""
    labels = np.asarray(labels)
    if labels.shape != logits.shape:
        raise ShapeError(f"labels shape {labels.shape} does not match logits shape {logits.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError("labels must be 0 or 1")
    if logits.size == 0:
        raise ShapeError("bce on an empty batch")

    z = logits.data.astype(np.float64)
    y = labels.astype(np.float64)
    elementwise = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(elementwise.mean()).astype(logits.dtype)
    count = logits.size

    def backward(g):
        return ((g * (expit(z) - y) / count).astype(logits.dtype),)

    return _emit("bce_with_logits", out, (logits,), backward)
