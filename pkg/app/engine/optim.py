"""AdamW with decoupled weight decay."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from app.core.error_handling import ContractError, NonFiniteError, ShapeError
from app.engine.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    """Optimizer hyperparameters plus per-parameter moment buffers"""
    lr: float
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)  # float64
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)  # float64

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ContractError(f"weight decay must be nonnegative, got {self.weight_decay}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")


def adamw_step(params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]],
               state: AdamWState) -> AdamWState:
    """One AdamW update; grads default to each parameter's .grad

    Parameters without a gradient are skipped. Every gradient is validated
    before any parameter moves.
    """
    if not state.lr > 0:
        raise ContractError(f"learning rate must be positive, got {state.lr}")

    updates = {}
    for name, tensor in params.items():
        grad = tensor.grad if grads is None else grads.get(name)
        if grad is None:
            continue
        grad = np.asarray(grad)
        if grad.shape != tensor.shape:
            raise ShapeError(f"{name}: gradient shape {grad.shape} != parameter shape {tensor.shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        moment = state.exp_avg.get(name)
        if moment is not None and moment.shape != tensor.shape:
            raise ShapeError(f"{name}: moment buffer shape {moment.shape} != parameter shape {tensor.shape}")
        updates[name] = grad.astype(np.float64)

    state.step += 1
    bias_correction1 = 1.0 - state.beta1 ** state.step
    bias_correction2 = 1.0 - state.beta2 ** state.step
    decay = 1.0 - state.lr * state.weight_decay

    for name, grad in updates.items():
        tensor = params[name]
        exp_avg = state.exp_avg.setdefault(name, np.zeros(tensor.shape, dtype=np.float64))
        exp_avg_sq = state.exp_avg_sq.setdefault(name, np.zeros(tensor.shape, dtype=np.float64))
        exp_avg *= state.beta1
        exp_avg += (1.0 - state.beta1) * grad
        exp_avg_sq *= state.beta2
        exp_avg_sq += (1.0 - state.beta2) * grad * grad

        value = tensor.data.astype(np.float64) * decay
        denom = np.sqrt(exp_avg_sq / bias_correction2) + state.eps
        value -= state.lr * (exp_avg / bias_correction1) / denom
        tensor.data = value.astype(tensor.dtype)

    return state


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm; returns the norm before clipping"""
    if max_norm <= 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for tensor in params.values():
        if tensor.grad is not None:
            total += float(np.square(tensor.grad, dtype=np.float64).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for tensor in params.values():
            if tensor.grad is not None:
                tensor.grad = (tensor.grad * scale).astype(tensor.dtype)
    return norm


class AdamW:
    """Stateful wrapper binding AdamWState to a parameter dict"""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 3e-5, weight_decay: float = 1e-2,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamWState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)
        logger.info(f"AdamW initialised over {len(self.params)} tensors: lr={lr}, weight_decay={weight_decay}")

    def set_lr(self, lr: float) -> None:
        if not lr > 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.state.lr = lr

    def step(self) -> None:
        adamw_step(self.params, None, self.state)

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()
