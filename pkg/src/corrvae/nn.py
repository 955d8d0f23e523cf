"""Feed-forward building blocks and the Adam optimizer on top of numcore."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .numcore import Rng, Tensor, relu, tanh

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"relu": relu, "tanh": tanh}


class Linear:
    """y = x @ W + b, with W stored as (fan_in, fan_out)."""

    def __init__(self, fan_in: int, fan_out: int, rng: Rng | None = None,
                 zero: bool = False, bias: bool = True):
        if zero or rng is None:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform((fan_in, fan_out), -bound, bound)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True) if bias else None

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor, weight: Tensor | None = None) -> Tensor:
        out = x @ (self.weight if weight is None else weight)
        return out if self.bias is None else out + self.bias

    def parameters(self) -> dict[str, Tensor]:
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params


class MLP:
    """Stack of Linear layers with a shared hidden activation.

    The final layer can be zero-initialized so an untrained network outputs
    exactly its (zero) bias.
    """

    def __init__(self, sizes: Iterable[int], rng: Rng, activation: str = "relu",
                 zero_last: bool = False):
        sizes = list(sizes)
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.activation = activation
        self._act = ACTIVATIONS[activation]
        n = len(sizes) - 1
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng, zero=zero_last and i == n - 1)
            for i in range(n)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = self._act(layer(x))
        return self.layers[-1](x)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers)
                for k, v in layer.parameters().items()}


def prefixed(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


class Adam:
    """Adam over a fixed name -> Tensor map.

    Updates rebind ``param.data`` to a fresh array instead of writing in place.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 lr_overrides: dict[str, float] | None = None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr_overrides = lr_overrides or {}
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _lr_for(self, name: str) -> float:
        for prefix, lr in self.lr_overrides.items():
            if name.startswith(prefix):
                return lr
        return self.lr

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            step = self._lr_for(name) * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = p.data - step
