"""Parameter containers and the small layer set the network is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def child_rng(rng: np.random.Generator) -> np.random.Generator:
    return np.random.default_rng(int(rng.integers(0, 2**63 - 1)))


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self.__dict__.items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, value in self.__dict__.items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters, materializing lazy layers from stored shapes."""
        self._materialize_lazy(state, "")
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def _materialize_lazy(self, state, prefix: str) -> None:
        for key, value in self.__dict__.items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            items = []
            if isinstance(value, Module):
                items = [(name, value)]
            elif isinstance(value, (list, tuple)):
                items = [(f"{name}.{i}", v) for i, v in enumerate(value) if isinstance(v, Module)]
            for sub_name, mod in items:
                if isinstance(mod, _Lazy) and not mod.built and f"{sub_name}.weight" in state:
                    mod.build(int(np.asarray(state[f"{sub_name}.weight"]).shape[1]))
                mod._materialize_lazy(state, sub_name + ".")


def _init_weight(rng: np.random.Generator, shape, fan_in: int, std: float | None) -> Tensor:
    scale = (1.0 / np.sqrt(fan_in)) if std is None else std
    return parameter(rng.normal(0.0, scale, size=shape))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float | None = None, bias: bool = True):
        self.weight = _init_weight(rng, (n_out, n_in), n_in, std)
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, std: float | None = None):
        self.weight = _init_weight(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel, std)
        self.bias = parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, n: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(n))
        self.bias = parameter(np.zeros(n))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self._p = p
        self._rng = child_rng(rng)

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self._p == 0.0:
            return x
        keep = (self._rng.random(x.shape) >= self._p) / (1.0 - self._p)
        return T.mul(x, keep)


class _Lazy(Module):
    """Layer whose input width is fixed by the first tensor it sees."""

    def __init__(self, n_out: int, rng: np.random.Generator):
        self.n_out = n_out
        self._rng = child_rng(rng)
        self.weight: Tensor | None = None
        self.bias: Tensor | None = None
        self.n_in: int | None = None

    @property
    def built(self) -> bool:
        return self.weight is not None

    def _weight_shape(self, n_in: int) -> tuple[int, ...]:
        raise NotImplementedError

    def build(self, n_in: int) -> None:
        self.n_in = n_in
        self.weight = _init_weight(self._rng, self._weight_shape(n_in), n_in, None)
        self.bias = parameter(np.zeros(self.n_out))

    def _ensure(self, n_in: int, what: str) -> None:
        if not self.built:
            self.build(n_in)
        elif n_in != self.n_in:
            raise ValueError(f"{what}: input width {n_in} differs from width {self.n_in} fixed on first use")


class LazyLinear(_Lazy):
    def _weight_shape(self, n_in):
        return (self.n_out, n_in)

    def __call__(self, x: Tensor) -> Tensor:
        self._ensure(x.shape[-1], "LazyLinear")
        return T.linear(x, self.weight, self.bias)


class LazyConv1x1(_Lazy):
    def _weight_shape(self, n_in):
        return (self.n_out, n_in, 1, 1)

    def __call__(self, x: Tensor) -> Tensor:
        self._ensure(x.shape[1], "LazyConv1x1")
        return T.conv2d(x, self.weight, self.bias)
