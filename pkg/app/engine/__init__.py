"""Numeric core: tensors, reverse-mode tape, primitives, optimizer, checkpoints."""

from app.engine.tensor import (
    ComputationTape,
    Tensor,
    backward,
    current_tape,
    default_dtype,
    no_grad,
    parameter,
    reset_tape,
)

__all__ = [
    "ComputationTape",
    "Tensor",
    "backward",
    "current_tape",
    "default_dtype",
    "no_grad",
    "parameter",
    "reset_tape",
]
