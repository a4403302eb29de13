"""Diagonal Gaussians over latent vectors.

All functions reduce over the last axis, so a leading batch axis is allowed
everywhere: ``mu`` of shape ``(B, L)`` gives ``log_prob`` of shape ``(B,)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor
from .autodiff import ShapeError

LOG_2PI = math.log(2.0 * math.pi)
SIGMA_FLOOR = 1e-6


@dataclass
class DiagonalGaussian:
    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.sigma = as_tensor(self.sigma)
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(f"mu shape {self.mu.shape} != sigma shape {self.sigma.shape}")

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[-1]

    @classmethod
    def from_raw(cls, mu, sigma_raw) -> "DiagonalGaussian":
        """Build from an unconstrained network head: sigma = softplus(raw) + 1e-6."""
        return cls(as_tensor(mu), as_tensor(sigma_raw).softplus() + SIGMA_FLOOR)


def _check_latent(g: DiagonalGaussian, v: Tensor, what: str) -> None:
    if v.shape[-1] != g.latent_dim:
        raise ShapeError(f"{what} has length {v.shape[-1]}, latent dimension is {g.latent_dim}")


def sample_reparameterized(g: DiagonalGaussian, noise) -> Tensor:
    """z0 = mu + sigma * noise, differentiable in mu and sigma."""
    noise = as_tensor(noise)
    _check_latent(g, noise, "noise")
    return g.mu + g.sigma * noise


def log_prob(g: DiagonalGaussian, z) -> Tensor:
    z = as_tensor(z)
    _check_latent(g, z, "z")
    std = (z - g.mu) / g.sigma
    per_dim = -0.5 * LOG_2PI - g.sigma.log() - 0.5 * std * std
    return per_dim.sum(axis=-1)


def kl_diag_gaussians(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians."""
    if q.mu.shape[-1] != p.mu.shape[-1]:
        raise ShapeError(f"KL between latent sizes {q.mu.shape[-1]} and {p.mu.shape[-1]}")
    diff = q.mu - p.mu
    var_ratio = (q.sigma * q.sigma + diff * diff) / (2.0 * p.sigma * p.sigma)
    per_dim = p.sigma.log() - q.sigma.log() + var_ratio - 0.5
    return per_dim.sum(axis=-1)


def kl_monte_carlo(q: DiagonalGaussian, p: DiagonalGaussian, noise) -> np.ndarray:
    """Per-draw estimates log q(z) - log p(z) for z = mu_q + sigma_q * noise.

    ``noise`` has shape ``(N, L)``; returns ``N`` single-sample estimates whose
    mean is unbiased for :func:`kl_diag_gaussians`.
    """
    noise = np.asarray(noise, dtype=np.float64)
    qd = DiagonalGaussian(q.mu.data, q.sigma.data)
    pd = DiagonalGaussian(p.mu.data, p.sigma.data)
    z = sample_reparameterized(qd, noise)
    return (log_prob(qd, z) - log_prob(pd, z)).data
