"""Training objective: split reconstruction, beta-weighted KL terms, and an ELBO cross-check."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .distributions import DiagGaussian, kl_between, kl_to_standard_normal, recon_log_likelihood
from .model import ForwardOutput, LatentCodes
from .tensor import ShapeError, Tensor, slice_

KL_RANGES = ("full", "skip_anchor")


@dataclass
class LossBreakdown:
    recon_rest: Tensor
    recon_anchor: Tensor
    kl_static: Tensor
    kl_dynamic: Tensor
    total: Tensor
    alpha: float
    beta: float

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("recon_rest", "recon_anchor", "kl_static", "kl_dynamic", "total")}


def _time_slices(a: Tensor, i: int) -> list[Tensor]:
    T = a.shape[1]
    parts = []
    if i > 0:
        parts.append(slice_(a, 1, 0, i))
    if i + 1 < T:
        parts.append(slice_(a, 1, i + 1, T))
    return parts


def recon_loss(x, x_hat: Tensor, anchor: int, x_logvar: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Log-likelihood on the anchor step and on every other step, returned separately."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape != x_hat.shape:
        raise ShapeError(f"recon_loss: shapes {x.shape} and {x_hat.shape}")
    T = x.shape[1]
    if not 0 <= anchor < T:
        raise ShapeError(f"recon_loss: anchor {anchor} out of range for T={T}")
    lv_anchor = x_logvar[:, anchor] if x_logvar is not None else None
    recon_anchor = recon_log_likelihood(x[:, anchor], x_hat[:, anchor], lv_anchor)
    xs, hs = _time_slices(x, anchor), _time_slices(x_hat, anchor)
    lvs = _time_slices(x_logvar, anchor) if x_logvar is not None else [None] * len(xs)
    recon_rest = Tensor(0.0)
    for xp, hp, lp in zip(xs, hs, lvs):
        recon_rest = recon_rest + recon_log_likelihood(xp, hp, lp)
    return recon_rest, recon_anchor


def kl_reg(latents: LatentCodes, kl_range: str = "full") -> tuple[Tensor, Tensor]:
    """KL of the static posterior to N(0, I) and of the dynamic posterior to the learned prior."""
    if kl_range not in KL_RANGES:
        raise ValueError(f"unknown kl_range {kl_range!r}")
    kl_static = kl_to_standard_normal(latents.static)
    q, p = latents.dynamic, latents.prior
    if kl_range == "full":
        return kl_static, kl_between(q, p)
    kl_dynamic = Tensor(0.0)
    for qm, ql, pm, pl in zip(*(_time_slices(t, latents.anchor) for t in (q.mean, q.logvar, p.mean, p.logvar))):
        kl_dynamic = kl_dynamic + kl_between(DiagGaussian(qm, ql), DiagGaussian(pm, pl))
    return kl_static, kl_dynamic


def total_loss(x, out: ForwardOutput, alpha: float, beta: float, *, no_static_loss: bool = False,
               kl_range: str = "full") -> LossBreakdown:
    """Objective in maximization form: ``recon_rest + alpha*recon_anchor - beta*(kl_s + kl_d)``.

    ``no_static_loss`` drops the anchor reconstruction term (alpha taken as 0).
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    recon_rest, recon_anchor = recon_loss(x, out.x_hat, out.latents.anchor, out.x_logvar)
    kl_static, kl_dynamic = kl_reg(out.latents, kl_range)
    a = 0.0 if no_static_loss else alpha
    total = recon_rest + recon_anchor * a - (kl_static + kl_dynamic) * beta
    return LossBreakdown(recon_rest, recon_anchor, kl_static, kl_dynamic, total, a, beta)


def elbo_oracle(x, out: ForwardOutput) -> float:
    """Plain sequential ELBO ``log p(x | z) - KL(q(z | x) || p(z))`` with unit-variance likelihood.

    Written with explicit loops over python floats, independently of the
    tensor code path, so it can cross-check ``total_loss(alpha=1, beta=1)``.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xh = out.x_hat.data
    lv_x = out.x_logvar.data if out.x_logvar is not None else None
    lat = out.latents
    B, T, D = x.shape

    loglik = 0.0
    for b in range(B):
        for t in range(T):
            for k in range(D):
                r = float(x[b, t, k]) - float(xh[b, t, k])
                if lv_x is None:
                    loglik += -0.5 * r * r
                else:
                    v = float(lv_x[b, t, k])
                    loglik += -0.5 * (r * r / math.exp(v) + v)

    def kl_scalar(mq, lq, mp, lp):
        # log(sigma_p / sigma_q) + (sigma_q^2 + (mu_q - mu_p)^2) / (2 sigma_p^2) - 1/2
        return 0.5 * (lp - lq) + (math.exp(lq) + (mq - mp) ** 2) / (2.0 * math.exp(lp)) - 0.5

    kl = 0.0
    ms, ls = lat.static.mean.data, lat.static.logvar.data
    for b in range(B):
        for j in range(ms.shape[1]):
            kl += kl_scalar(float(ms[b, j]), float(ls[b, j]), 0.0, 0.0)
    mq, lq = lat.dynamic.mean.data, lat.dynamic.logvar.data
    mp, lp = lat.prior.mean.data, lat.prior.logvar.data
    for b in range(B):
        for t in range(T):
            for j in range(mq.shape[2]):
                kl += kl_scalar(float(mq[b, t, j]), float(lq[b, t, j]), float(mp[b, t, j]), float(lp[b, t, j]))
    return loglik - kl
