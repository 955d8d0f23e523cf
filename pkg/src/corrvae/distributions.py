"""Diagonal Gaussians and minibatch total-correlation estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numcore import ShapeError, Tensor, as_tensor, exp, logsumexp, reshape, square

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.logvar = as_tensor(self.logvar)
        if self.mu.shape != self.logvar.shape:
            raise ShapeError(f"mu {self.mu.shape} and logvar {self.logvar.shape} differ")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar.data)


def reparameterize(g: DiagGaussian, eps) -> Tensor:
    """mu + exp(logvar / 2) * eps."""
    eps = as_tensor(eps)
    if eps.shape != g.shape:
        raise ShapeError(f"eps shape {eps.shape} does not match {g.shape}")
    return g.mu + exp(g.logvar * 0.5) * eps


def kl_to_standard(g: DiagGaussian) -> Tensor:
    """KL(g || N(0, I)), summed over the event dimension.

    A batch (2-D input) returns the batch mean of the per-row KL.
    """
    per_dim = (square(g.mu) + exp(g.logvar) - g.logvar - 1.0) * 0.5
    if g.mu.ndim == 1:
        return per_dim.sum()
    return per_dim.sum(axis=-1).mean()


def log_prob(g: DiagGaussian, x) -> Tensor:
    """Log-density of ``x`` under g, summed over the last axis."""
    x = as_tensor(x)
    if x.shape != g.shape:
        raise ShapeError(f"x shape {x.shape} does not match {g.shape}")
    per_dim = (LOG_2PI + g.logvar + square(x - g.mu) * exp(-g.logvar)) * -0.5
    return per_dim.sum(axis=-1)


def pairwise_log_density(samples, g: DiagGaussian) -> Tensor:
    """out[i, j, d] = log N(samples[i, d] | mu[j, d], var[j, d])."""
    samples = as_tensor(samples)
    b, d = g.shape
    if samples.shape != (b, d):
        raise ShapeError(f"samples {samples.shape} vs posteriors {g.shape}")
    s = reshape(samples, (b, 1, d))
    mu = reshape(g.mu, (1, b, d))
    lv = reshape(g.logvar, (1, b, d))
    return (LOG_2PI + lv + square(s - mu) * exp(-lv)) * -0.5


def importance_log_weights(batch_size: int, dataset_size: int) -> np.ndarray:
    """Log weights for estimating q(.) = E_data[q(.|x)] from one minibatch.

    A sample's own posterior stands for itself (weight 1/N); the other B-1
    posteriors stand for the remaining N-1 data points. Each row sums to one.
    """
    b, n = int(batch_size), int(dataset_size)
    if b < 2:
        raise ValueError("total correlation needs a batch of at least 2")
    if n < b:
        raise ValueError(f"dataset_size {n} is smaller than the batch {b}")
    w = np.full((b, b), (n - 1) / (n * (b - 1)))
    np.fill_diagonal(w, 1.0 / n)
    return np.log(w)


def total_correlation_terms(w_samples, z_samples, w_post: DiagGaussian,
                            z_post: DiagGaussian, dataset_size: int) -> tuple[Tensor, Tensor]:
    """Minibatch estimates of KL(q(z,w) || q(z)q(w)) and KL(q(w) || prod_i q(w_i)).

    Aggregate posteriors are approximated with importance-weighted
    logsumexp over the minibatch posteriors.
    """
    b = w_post.shape[0]
    if b < 2:
        raise ValueError("total correlation needs a batch of at least 2")
    if z_post.shape[0] != b:
        raise ShapeError("w and z posteriors have different batch sizes")
    logw = Tensor(importance_log_weights(b, dataset_size))
    lw = pairwise_log_density(w_samples, w_post)        # B x B x l
    lz = pairwise_log_density(z_samples, z_post)        # B x B x d_z
    lw_joint = lw.sum(axis=2)
    lz_joint = lz.sum(axis=2)

    log_qw = logsumexp(lw_joint + logw, axis=1)
    log_qz = logsumexp(lz_joint + logw, axis=1)
    log_qzw = logsumexp(lw_joint + lz_joint + logw, axis=1)
    log_qw_marginals = logsumexp(lw + reshape(logw, (b, b, 1)), axis=1).sum(axis=1)

    tc_zw = (log_qzw - log_qz - log_qw).mean()
    tc_w = (log_qw - log_qw_marginals).mean()
    return tc_zw, tc_w
