"""Parameter containers and the basic layers built on them."""

from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np
from scipy.stats import truncnorm

from app.core.error_handling import CheckpointFormatError, ShapeError
from app.engine import ops
from app.engine.tensor import Tensor, get_default_dtype, parameter

INIT_STD = 0.02


def truncated_normal(shape, rng: np.random.Generator, std: float = INIT_STD) -> np.ndarray:
    """Zero-mean normal truncated at +-2 std"""
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=get_default_dtype())


@dataclass
class ForwardContext:
    """Per-call switches threaded through every forward pass"""
    training: bool = False
    rng: Optional[np.random.Generator] = None  # dropout stream, required when training
    trace: Optional[Any] = None  # AttentionTrace sink
    retain_attention_grads: bool = False

    def dropout(self, x: Tensor, rate: float) -> Tensor:
        return ops.dropout(x, rate, self.rng, self.training)


class Module:
    """Base class with a deterministic named-parameter registry"""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name: str, value) -> None:
        if "_parameters" not in self.__dict__:
            raise AttributeError(f"{type(self).__name__}.__init__ must call super().__init__() first")
        self._parameters.pop(name, None)
        self._modules.pop(name, None)
        if isinstance(value, Tensor) and value.requires_grad:
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._parameters.items():
            yield f"{prefix}{name}", tensor
        for name, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def parameter_count(self) -> int:
        return int(sum(t.size for _, t in self.named_parameters()))

    def zero_grad(self) -> None:
        for _, tensor in self.named_parameters():
            tensor.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise CheckpointFormatError(
                f"checkpoint does not match model: missing={missing[:5]} unexpected={unexpected[:5]}"
            )
        for name, tensor in params.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != parameter shape {tensor.shape}")
            tensor.data = value.astype(tensor.dtype, copy=True)
            tensor.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 is used for gradient checks)"""
        for _, tensor in self.named_parameters():
            tensor.data = tensor.data.astype(dtype)
            tensor.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    """Indexed container registering children as "0", "1", ..."""

    def __init__(self, modules: Optional[List[Module]] = None):
        super().__init__()
        self._items: List[Module] = []
        for module in modules or []:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]


class Linear(Module):
    """y = x W + b with W stored as [in, out]"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = parameter(truncated_normal((in_features, out_features), rng))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects width {self.in_features}, got input shape {x.shape}")
        out = ops.matmul(x, self.weight)
        return ops.add(out, self.bias) if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gain = parameter(np.ones(width))
        self.bias = parameter(np.zeros(width))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num_embeddings: int, width: int, rng: np.random.Generator):
        super().__init__()
        self.table = parameter(truncated_normal((num_embeddings, width), rng))

    def forward(self, ids: np.ndarray) -> Tensor:
        return ops.take(self.table, ids)


class FeedForward(Module):
    """Two Linear layers with an activation; dropout after each layer"""

    def __init__(self, width: int, hidden: int, rng: np.random.Generator, dropout: float = 0.0,
                 activation: str = "gelu", out_width: Optional[int] = None):
        super().__init__()
        self.fc1 = Linear(width, hidden, rng)
        self.fc2 = Linear(hidden, out_width or width, rng)
        self.rate = dropout
        self.activation = ops.gelu if activation == "gelu" else ops.relu

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        hidden = ctx.dropout(self.activation(self.fc1(x)), self.rate)
        return ctx.dropout(self.fc2(hidden), self.rate)


class MLPStack(Module):
    """Linear layers over `sizes` with ReLU+dropout after every hidden layer"""

    def __init__(self, sizes: List[int], rng: np.random.Generator, dropout: float = 0.0,
                 activate_last: bool = True):
        super().__init__()
        if len(sizes) < 2:
            raise ShapeError(f"MLPStack needs at least input and output sizes, got {sizes}")
        self.sizes = list(sizes)
        self.layers = ModuleList([Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])])
        self.rate = dropout
        self.activate_last = activate_last

    @property
    def in_features(self) -> int:
        return self.sizes[0]

    @property
    def out_features(self) -> int:
        return self.sizes[-1]

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        last = len(self.layers) - 1
        for index, layer in enumerate(self.layers):
            x = layer(x)
            if index < last or self.activate_last:
                x = ctx.dropout(ops.relu(x), self.rate)
        return x
