"""Finite-difference gradient oracle shared by the test modules."""

from __future__ import annotations

import numpy as np

from corrvae import numcore as nc
from corrvae.numcore import Rng, Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar function f at x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_grad(build, *inputs: np.ndarray, h: float = 1e-5) -> float:
    """Worst relative error between autodiff and central differences over every input.

    ``build`` maps Tensors to a scalar Tensor.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    worst = 0.0
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    build(*tensors).backward()
    for k, t in enumerate(tensors):
        def f(v, k=k):
            args = [Tensor(v if j == k else inputs[j]) for j in range(len(inputs))]
            return build(*args).item()
        worst = max(worst, rel_error(t.grad, numeric_grad(f, inputs[k], h)))
    return worst


def _rand(seed, *shape):
    return Rng(seed).normal(shape)


# each case: (name, build(*tensors) -> scalar, input arrays)
OP_CASES = [
    ("add", lambda a, b: nc.add(a, b).sum(), [_rand(1, 3, 4), _rand(2, 3, 4)]),
    ("add-broadcast", lambda a, b: nc.add(a, b).sum(), [_rand(1, 3, 4), _rand(2, 1, 4)]),
    ("sub", lambda a, b: nc.square(nc.sub(a, b)).sum(), [_rand(3, 5), _rand(4, 5)]),
    ("mul", lambda a, b: nc.mul(a, b).sum(), [_rand(5, 2, 3), _rand(6, 2, 3)]),
    ("mul-broadcast", lambda a, b: nc.mul(a, b).sum(), [_rand(5, 2, 3), _rand(6, 3)]),
    ("div", lambda a, b: nc.div(a, b).sum(), [_rand(7, 4), 2.0 + np.abs(_rand(8, 4))]),
    ("scale", lambda a: nc.scale(a, -2.5).sum(), [_rand(9, 3)]),
    ("relu", lambda a: (nc.relu(a) * a).sum(), [np.array([-1.3, -0.2, 0.4, 2.0])]),
    ("tanh", lambda a: nc.tanh(a).sum(), [_rand(10, 6)]),
    ("sigmoid", lambda a: nc.sigmoid(a).sum(), [3 * _rand(11, 6)]),
    ("softplus", lambda a: nc.softplus(a).sum(), [3 * _rand(12, 6)]),
    ("exp", lambda a: nc.exp(a).sum(), [_rand(13, 5)]),
    ("log", lambda a: nc.log(a).sum(), [0.5 + np.abs(_rand(14, 5))]),
    ("sqrt", lambda a: nc.sqrt(a).sum(), [0.5 + np.abs(_rand(15, 5))]),
    ("square", lambda a: nc.square(a).sum(), [_rand(16, 5)]),
    ("sum-axis", lambda a: nc.square(nc.tsum(a, axis=1)).sum(), [_rand(17, 3, 4)]),
    ("sum-keepdims", lambda a: (nc.tsum(a, axis=0, keepdims=True) * a).sum(), [_rand(18, 3, 4)]),
    ("mean", lambda a: nc.square(nc.mean(a, axis=0)).sum(), [_rand(19, 3, 4)]),
    ("logsumexp", lambda a: nc.square(nc.logsumexp(a, axis=1)).sum(), [_rand(20, 3, 5)]),
    ("logsumexp-keepdims", lambda a: (nc.logsumexp(a, axis=0, keepdims=True) * a).sum(),
     [_rand(21, 3, 5)]),
    ("matmul", lambda a, b: nc.tanh(nc.matmul(a, b)).sum(), [_rand(22, 3, 4), _rand(23, 4, 2)]),
    ("transpose", lambda a: (nc.transpose(a) * np.arange(6.0).reshape(3, 2)).sum(), [_rand(24, 2, 3)]),
    ("reshape", lambda a: (nc.reshape(a, (3, 2)) * np.arange(6.0).reshape(3, 2)).sum(), [_rand(25, 2, 3)]),
    ("concat", lambda a, b: (nc.concat([a, b], axis=1) * np.arange(10.0).reshape(2, 5)).sum(),
     [_rand(26, 2, 2), _rand(27, 2, 3)]),
    ("slice", lambda a: nc.square(nc.take(a, (slice(None), 1))).sum(), [_rand(28, 3, 4)]),
    ("slice-repeat", lambda a: (nc.take(a, [0, 0, 2]) * np.array([1.0, 2.0, 3.0])).sum(), [_rand(29, 4)]),
    ("operators", lambda a, b: (-(a @ b) * 2.0 - 1.0 / (1.5 + a[0, 0] * a[0, 0])).sum(),
     [_rand(30, 2, 3), _rand(31, 3, 2)]),
]
