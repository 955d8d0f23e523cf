"""Mask pooling: a learnable binary latent-to-property mask and the
per-property aggregation networks that turn masked latents into w'."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import MLP, Linear, prefixed
from .numcore import Rng, ShapeError, Tensor, as_tensor, concat, sigmoid, straight_through


@dataclass
class MaskMatrix:
    """Logits of an l x m matrix of independent Bernoulli gates."""

    logits: Tensor
    tau: float = 1.0
    hard: bool = False

    @classmethod
    def init(cls, l: int, m: int, logit: float = 1.0, tau: float = 1.0) -> "MaskMatrix":
        return cls(Tensor(np.full((l, m), float(logit)), requires_grad=True), tau=tau)

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape

    def expected(self) -> Tensor:
        return sigmoid(self.logits)

    def hard_mask(self) -> np.ndarray:
        """Deterministic eval-time mask: the mode of each gate."""
        return (self.logits.data > 0).astype(np.float64)


def sample_mask(mask: MaskMatrix, rng: Rng) -> Tensor:
    """Binary-concrete sample sigmoid((logits + g1 - g0) / tau).

    With ``mask.hard`` the forward value is rounded to {0, 1} and the relaxed
    sample's gradient is passed straight through.
    """
    if not mask.tau > 0:
        raise ValueError(f"temperature must be positive, got {mask.tau}")
    shape = mask.shape
    noise = rng.gumbel(shape) - rng.gumbel(shape)
    relaxed = sigmoid((mask.logits + noise) * (1.0 / mask.tau))
    if not mask.hard:
        return relaxed
    return straight_through(relaxed, (relaxed.data > 0.5).astype(np.float64))


def sparsity_loss(mask: MaskMatrix) -> Tensor:
    """L1 norm of the expected mask."""
    return mask.expected().sum()


def geometric_tau(step: int, total_steps: int, start: float = 1.0, end: float = 0.1) -> float:
    if total_steps <= 1:
        return end
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return start * (end / start) ** frac


class Aggregator:
    """One small network h_j per property mapping a masked l-vector to w'_j."""

    def __init__(self, l: int, m: int, rng: Rng, hidden: int = 32, linear: bool = False):
        self.l, self.m = l, m
        self.linear = linear
        if linear:
            self.nets = [Linear(l, 1, rng) for _ in range(m)]
        else:
            self.nets = [MLP([l, hidden, 1], rng, activation="tanh") for _ in range(m)]

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for j, net in enumerate(self.nets):
            out.update(prefixed(str(j), net.parameters()))
        return out


def aggregate(w, mask, agg: Aggregator) -> Tensor:
    """w'_j = h_j(w * M[:, j]) for every property column j."""
    w = as_tensor(w)
    M = as_tensor(mask)
    if w.ndim != 2 or w.shape[1] != agg.l:
        raise ShapeError(f"w must be (batch, {agg.l}), got {w.shape}")
    if M.shape != (agg.l, agg.m):
        raise ShapeError(f"mask must be ({agg.l}, {agg.m}), got {M.shape}")
    cols = [net(w * M[:, j].reshape(1, agg.l)) for j, net in enumerate(agg.nets)]
    return concat(cols, axis=1)


def correlation_pairs(m_hard) -> set[tuple[int, int]]:
    """Property pairs (i, j), i < j, whose mask columns share a latent."""
    M = np.asarray(m_hard.data if isinstance(m_hard, Tensor) else m_hard)
    if M.ndim != 2:
        raise ShapeError("mask must be a matrix")
    if not np.all((M == 0) | (M == 1)):
        raise ValueError("correlation_pairs needs a strictly binary mask")
    overlap = M.T @ M
    return {(i, j) for i, j in itertools.combinations(range(M.shape[1]), 2) if overlap[i, j] != 0}


def name_pairs(pairs, names: Sequence[str]) -> set[frozenset[str]]:
    return {frozenset((names[i], names[j])) for i, j in pairs}


def export_mask_csv(mask: MaskMatrix, names: Sequence[str], out_dir: str | Path,
                    stem: str = "mask") -> tuple[Path, Path]:
    """Write ``<stem>_hard.csv`` and ``<stem>_prob.csv`` (rows = latents)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = out_dir / f"{stem}_hard.csv", out_dir / f"{stem}_prob.csv"
    for path, values in zip(paths, (mask.hard_mask(), mask.expected().data)):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["latent", *names])
            for i, row in enumerate(values):
                writer.writerow([f"w{i + 1}", *(repr(float(v)) for v in row)])
    return paths
