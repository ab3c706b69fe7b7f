"""Layers, the two-stage split classifier, and plain SGD."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import DimensionError, ParameterError, StateError
from .tensor import DEFAULT_DTYPE, Tensor, linear


class Linear:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (in_features, out_features)), requires_grad=True, dtype=dtype)
        self.bias = Tensor(rng.uniform(-bound, bound, (out_features,)), requires_grad=True, dtype=dtype)

    @classmethod
    def from_arrays(cls, weight, bias, dtype=DEFAULT_DTYPE) -> "Linear":
        layer = cls.__new__(cls)
        layer.weight = Tensor(weight, requires_grad=True, dtype=dtype)
        layer.bias = Tensor(bias, requires_grad=True, dtype=dtype)
        return layer

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def __repr__(self) -> str:
        return f"Linear({self.in_features}, {self.out_features})"


class ReLU:
    in_features = out_features = None

    def parameters(self) -> list[Tensor]:
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return x.relu()

    def __repr__(self) -> str:
        return "ReLU()"


class Tanh(ReLU):
    def __call__(self, x: Tensor) -> Tensor:
        return x.tanh()

    def __repr__(self) -> str:
        return "Tanh()"


def _stage_widths(stage: Sequence) -> tuple[int | None, int | None]:
    widths = [(l.in_features, l.out_features) for l in stage if l.in_features is not None]
    if not widths:
        return None, None
    for (_, out), (nxt, _) in zip(widths, widths[1:]):
        if out != nxt:
            raise DimensionError("consecutive layer widths", out, nxt)
    return widths[0][0], widths[-1][1]


class SplitModel:
    """Classifier written as ``head(repr(x))``.

    ``repr_stage`` produces the fixed-width representation used for prototypes;
    ``head_stage`` maps it to class logits. ``forward_calls`` counts invocations
    of :func:`forward_split`, which lets callers verify a model was skipped.
    """

    def __init__(self, repr_stage: Sequence, head_stage: Sequence):
        self.repr_stage = list(repr_stage)
        self.head_stage = list(head_stage)
        in_w, self.repr_width = _stage_widths(self.repr_stage)
        head_in, self.n_classes = _stage_widths(self.head_stage)
        if in_w is None or head_in is None:
            raise DimensionError("split model stages", "at least one linear layer each", "none")
        if self.repr_width != head_in:
            raise DimensionError("head input width vs representation width", self.repr_width, head_in)
        self.input_width = in_w
        self.forward_calls = 0

    def parameters(self) -> list[Tensor]:
        """Flat parameter list: layer-major, weight before bias."""
        return [p for layer in self.repr_stage + self.head_stage for p in layer.parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def architecture(self) -> list[tuple[int, ...]]:
        return [p.shape for p in self.parameters()]

    def represent(self, x: Tensor) -> Tensor:
        for layer in self.repr_stage:
            x = layer(x)
        return x

    def head(self, r: Tensor) -> Tensor:
        for layer in self.head_stage:
            r = layer(r)
        return r

    def __call__(self, x: Tensor) -> Tensor:
        return forward_split(self, x)[1]

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise DimensionError("parameter tensor count", len(params), len(arrays))
        for p, a in zip(params, arrays):
            a = np.asarray(a)
            if a.shape != p.shape:
                raise DimensionError("parameter shape", p.shape, a.shape)
            p.data = a.astype(p.dtype, copy=True)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "SplitModel":
        """Deep copy with every parameter cast to ``dtype``."""
        def conv(stage):
            out = []
            for layer in stage:
                if isinstance(layer, Linear):
                    out.append(Linear.from_arrays(layer.weight.data, layer.bias.data, dtype))
                else:
                    out.append(type(layer)())
            return out

        return SplitModel(conv(self.repr_stage), conv(self.head_stage))

    def clone(self) -> "SplitModel":
        return self.astype(self.parameters()[0].dtype)

    def __repr__(self) -> str:
        return f"SplitModel(repr={self.repr_stage}, head={self.head_stage})"


def forward_split(model: SplitModel, batch: Tensor) -> tuple[Tensor, Tensor]:
    """Run both stages and return ``(representation, logits)``."""
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    if batch.ndim != 2 or batch.shape[1] != model.input_width:
        raise DimensionError("input batch width", model.input_width, batch.shape)
    model.forward_calls += 1
    r = model.represent(batch)
    return r, model.head(r)


def mlp_split_model(input_width: int, hidden: Sequence[int], repr_width: int, n_classes: int,
                    seed: int | np.random.Generator = 0, activation: str = "relu",
                    dtype=DEFAULT_DTYPE) -> SplitModel:
    """Build ``input -> hidden... -> repr_width`` (each followed by the activation) then a linear head."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    act = {"relu": ReLU, "tanh": Tanh}[activation]
    widths = [input_width, *hidden, repr_width]
    repr_stage: list = []
    for a, b in zip(widths, widths[1:]):
        repr_stage += [Linear(a, b, rng, dtype), act()]
    return SplitModel(repr_stage, [Linear(repr_width, n_classes, rng, dtype)])


def sgd_step(model: SplitModel, lr: float) -> None:
    """``p <- p - lr * grad`` for every parameter, then clear gradients."""
    if lr < 0:
        raise ParameterError(f"learning rate must be non-negative, got {lr}")
    params = model.parameters()
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise StateError(f"no gradient for parameter(s) {missing}; call backward() first")
    for p in params:
        p.data -= lr * p.grad
        p.grad = None
