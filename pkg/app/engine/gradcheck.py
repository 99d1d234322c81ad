"""Central finite-difference checks against the reverse pass."""

import logging
from typing import Callable, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.core.error_handling import ContractError
from app.engine.tensor import Tensor, backward, no_grad, reset_tape

logger = logging.getLogger(__name__)

Coordinate = Tuple[Tensor, Tuple[int, ...]]


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-8)


def _evaluate(f: Callable[[], Tensor]) -> float:
    with no_grad():
        return f().item()


def check_coordinates(f: Callable[[], Tensor], coordinates: Sequence[Coordinate], h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients

    f takes no arguments and reads the perturbed tensors through closure.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ContractError(f"step h must lie in [1e-5, 1e-2], got {h}")

    first, second = _evaluate(f), _evaluate(f)
    if first != second:
        raise ContractError(f"function is not deterministic ({first!r} != {second!r}); disable dropout")

    tensors = {id(t): t for t, _ in coordinates}
    for tensor in tensors.values():
        if not tensor.requires_grad:
            raise ContractError("finite-difference check needs tensors with requires_grad=True")
        tensor.zero_grad()
    reset_tape()
    backward(f())

    worst = 0.0
    for tensor, index in coordinates:
        analytic = 0.0 if tensor.grad is None else float(tensor.grad[index])
        original = tensor.data[index].copy()
        try:
            tensor.data[index] = original + h
            plus = _evaluate(f)
            tensor.data[index] = original - h
            minus = _evaluate(f)
        finally:
            tensor.data[index] = original
        numeric = (plus - minus) / (2.0 * h)
        worst = max(worst, _relative_error(analytic, numeric))
    return worst


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
                      indices: Optional[Iterable[Tuple[int, ...]]] = None) -> float:
    """Check df/dx for every coordinate of x (or the given indices)"""
    coords = list(indices) if indices is not None else list(np.ndindex(*x.shape))
    return check_coordinates(lambda: f(x), [(x, tuple(i)) for i in coords], h)


def sample_parameter_coordinates(params: Mapping[str, Tensor], count: int,
                                 rng: np.random.Generator) -> List[Coordinate]:
    """Pick `count` random (parameter, index) pairs, parameters weighted equally"""
    names = sorted(params)
    chosen = []
    for _ in range(count):
        tensor = params[names[rng.integers(len(names))]]
        index = tuple(int(rng.integers(size)) for size in tensor.shape)
        chosen.append((tensor, index))
    return chosen
