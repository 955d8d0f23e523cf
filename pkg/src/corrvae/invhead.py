"""Invertible residual property head y = w' + fbar(w').

Each layer of fbar is spectrally normalized to norm ``c`` < 1, which makes
fbar a contraction; the head is then inverted by fixed-point iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import LOG_2PI
from .nn import ACTIVATIONS, Linear, prefixed
from .numcore import Rng, ShapeError, Tensor, as_tensor, square


class InversionError(RuntimeError):
    """Fixed-point iteration did not reach tolerance; fbar is likely not a contraction."""


BLOCK = 4


def _orth(a: np.ndarray) -> np.ndarray:
    return np.linalg.qr(a)[0]


def power_iteration(W: np.ndarray, U: np.ndarray, iters: int
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Block power iteration with a Rayleigh-Ritz step.

    U is a (rows, k) block of persistent left-vector estimates (a single
    vector is accepted). Returns (refined block, u, v, sigma) with u, v the
    top Ritz singular pair. The error of sigma decays like (s_{k+1}/s_1)^(2 iters),
    so nearly coincident top singular values do not stall it, and k equal to
    the smaller side of W gives the exact value.
    """
    if iters < 1:
        raise ValueError("need at least one power iteration")
    U = np.asarray(U, dtype=np.float64).reshape(W.shape[0], -1)
    for _ in range(iters):
        V = _orth(W.T @ U)
        U = _orth(W @ V)
    a, s, bt = np.linalg.svd(U.T @ W @ V)
    return U, U @ a[:, 0], V @ bt[0], float(s[0])


def init_block(rows: int, cols: int, rng: Rng) -> np.ndarray:
    k = min(BLOCK, rows, cols)
    return _orth(rng.normal((rows, k)))


def spectral_normalize(W, iters: int = 1, c: float = 0.97, u: np.ndarray | None = None,
                       rng: Rng | None = None) -> tuple[Tensor, np.ndarray, float]:
    """Return (c * W / sigma_hat, refined vector block, sigma_hat).

    sigma_hat = u^T W v for the power-iteration singular pair, kept as a
    graph node so gradients see the normalization; u and v themselves are
    constants. A zero matrix maps to zero.
    """
    W = as_tensor(W)
    if W.ndim != 2:
        raise ShapeError("spectral_normalize expects a matrix")
    if u is None:
        u = init_block(*W.shape, rng or Rng(0))
    if not np.any(W.data):
        return W * 0.0, u, 0.0
    block, left, right, _ = power_iteration(W.data, u, iters)
    sigma = (W * np.outer(left, right)).sum()
    return W * (c / sigma), block, sigma.item()


@dataclass
class InvertibleHead:
    """fbar: m -> hidden -> ... -> m with every weight matrix normalized to c."""

    m: int
    rng: Rng
    hidden: int = 32
    n_hidden: int = 2
    c: float = 0.97
    activation: str = "tanh"
    sigma: np.ndarray = field(default=None)
    layers: list = field(init=False)
    u: list = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.c < 1.0:
            raise ValueError("Lipschitz target c must lie in (0, 1)")
        sizes = [self.m] + [self.hidden] * self.n_hidden + [self.m]
        self.layers = [Linear(a, b, self.rng) for a, b in zip(sizes[:-1], sizes[1:])]
        # W is (fan_in, fan_out); each u block spans the fan_in space
        self.u = [init_block(layer.fan_in, layer.fan_out, self.rng) for layer in self.layers]
        if self.sigma is None:
            self.sigma = np.eye(self.m)
        self._act = ACTIVATIONS[self.activation]
        self._normalized: list[Tensor] | None = None
        self.sigmas: list[float] = []

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(prefixed(str(i), layer.parameters()))
        return out

    def normalize(self, iters: int = 1) -> list[Tensor]:
        """Advance power iteration and rebuild the normalized weights for this step."""
        weights, sigmas = [], []
        for i, layer in enumerate(self.layers):
            w_hat, self.u[i], sigma = spectral_normalize(layer.weight, iters, self.c, u=self.u[i])
            weights.append(w_hat)
            sigmas.append(sigma)
        self._normalized = weights
        self.sigmas = sigmas
        return weights

    def freeze(self, sigmas) -> list[Tensor]:
        """Rebuild normalized weights from stored singular-value estimates."""
        self.sigmas = [float(s) for s in sigmas]
        self._normalized = [layer.weight * (self.c / s) if s > 0 else layer.weight * 0.0
                            for layer, s in zip(self.layers, self.sigmas)]
        return self._normalized

    def normalized_weights(self) -> list[Tensor]:
        if self._normalized is None:
            raise RuntimeError("call normalize() before using the head")
        return self._normalized

    def spectral_norms(self) -> list[float]:
        return [float(np.linalg.norm(w.data, 2)) for w in self.normalized_weights()]

    def fbar(self, wp) -> Tensor:
        x = as_tensor(wp)
        weights = self.normalized_weights()
        for i, (layer, w) in enumerate(zip(self.layers, weights)):
            x = layer(x, weight=w)
            if i < len(self.layers) - 1:
                x = self._act(x)
        return x

    def fbar_numpy(self, wp: np.ndarray) -> np.ndarray:
        x = np.asarray(wp, dtype=np.float64)
        act = np.tanh if self.activation == "tanh" else (lambda a: np.maximum(a, 0.0))
        weights = self.normalized_weights()
        for i, (layer, w) in enumerate(zip(self.layers, weights)):
            x = x @ w.data + layer.bias.data
            if i < len(self.layers) - 1:
                x = act(x)
        return x

    def lipschitz_bound(self) -> float:
        return float(np.prod(self.spectral_norms()))


def predict(head: InvertibleHead, wp) -> Tensor:
    """y = w' + fbar(w')."""
    wp = as_tensor(wp)
    if wp.shape[-1] != head.m:
        raise ShapeError(f"w' has width {wp.shape[-1]}, head expects {head.m}")
    return wp + head.fbar(wp)


@dataclass
class InversionResult:
    wp: np.ndarray
    iterations: int
    residuals: list[float]


def invert(head: InvertibleHead, y, tol: float = 1e-10, max_iter: int = 200,
           return_trace: bool = False):
    """Solve y = w' + fbar(w') by iterating w' <- y - fbar(w') from w' = y.

    Stops once max |f(w') - y| <= tol. Raises InversionError after max_iter.
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.shape[-1] != head.m:
        raise ShapeError(f"y has width {y.shape[-1]}, head expects {head.m}")
    wp = y.copy()
    residuals = []
    for k in range(max_iter + 1):
        fb = head.fbar_numpy(wp)
        res = float(np.max(np.abs(wp + fb - y))) if y.size else 0.0
        residuals.append(res)
        if res <= tol:
            result = InversionResult(wp, k, residuals)
            return result if return_trace else wp
        wp = y - fb
    raise InversionError(
        f"fixed-point inversion stalled at residual {residuals[-1]:.3e} after {max_iter} iterations")


def l3_loss(head: InvertibleHead, wp, y) -> Tensor:
    """Batch-mean negative log-likelihood of y under N(f(w'), I)."""
    y = as_tensor(y)
    pred = predict(head, wp)
    if pred.shape != y.shape:
        raise ShapeError(f"prediction {pred.shape} vs targets {y.shape}")
    per_row = square(y - pred).sum(axis=-1) * 0.5 + 0.5 * head.m * LOG_2PI
    return per_row.mean()


def gaussian_objectives(head: InvertibleHead, wp: np.ndarray, y_hat: np.ndarray,
                        sigma: np.ndarray) -> tuple[float, float]:
    """(g1, g2): Sigma-weighted and plain negative squared residuals at w'."""
    r = y_hat - (wp + head.fbar_numpy(wp))
    return float(-r @ np.linalg.solve(sigma, r)), float(-r @ r)


def l3_constant(m: int) -> float:
    return 0.5 * m * math.log(2.0 * math.pi)
