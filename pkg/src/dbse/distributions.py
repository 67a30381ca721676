"""Diagonal Gaussians: reparameterized sampling, closed-form KLs, likelihoods."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, exp, square, sum_


@dataclass
class DiagGaussian:
    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ShapeError(f"DiagGaussian: mean {self.mean.shape} vs logvar {self.logvar.shape}")

    @property
    def shape(self):
        return self.mean.shape

    @property
    def var(self) -> Tensor:
        return exp(self.logvar)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.logvar.detach())


def standard_normal_like(q: DiagGaussian) -> DiagGaussian:
    return DiagGaussian(Tensor(np.zeros(q.shape)), Tensor(np.zeros(q.shape)))


def reparameterize(dist: DiagGaussian, noise) -> Tensor:
    """``mean + exp(logvar / 2) * noise``; the caller owns the RNG."""
    noise = noise if isinstance(noise, Tensor) else Tensor(noise)
    if noise.shape != dist.shape:
        raise ShapeError(f"reparameterize: noise {noise.shape} vs mean {dist.shape}")
    return dist.mean + exp(dist.logvar * 0.5) * noise


def kl_to_standard_normal(q: DiagGaussian) -> Tensor:
    """KL(q || N(0, I)) summed over every element (latent dims, time and batch)."""
    # same summation order as kl_between so the two agree bit-for-bit at p = N(0, I)
    return sum_((-q.logvar + exp(q.logvar) + square(q.mean) - 1.0) * 0.5)


def kl_between(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over every element."""
    if q.shape != p.shape:
        raise ShapeError(f"kl_between: shapes {q.shape} and {p.shape}")
    ratio = exp(q.logvar - p.logvar)
    mahal = square(q.mean - p.mean) * exp(-p.logvar)
    return sum_((p.logvar - q.logvar + ratio + mahal - 1.0) * 0.5)


def recon_log_likelihood(x, x_hat: Tensor, logvar: Tensor | None = None) -> Tensor:
    """Gaussian log-likelihood without the constant, summed (not averaged) over the batch.

    With ``logvar=None`` the variance is fixed to one, so this is ``-0.5 * SSE``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape != x_hat.shape:
        raise ShapeError(f"recon_log_likelihood: shapes {x.shape} and {x_hat.shape}")
    err = square(x - x_hat)
    if logvar is None:
        return sum_(err) * -0.5
    return sum_(err * exp(-logvar) + logvar) * -0.5
