"""Kernel density estimates of a latent batch and the resulting multiinformation loss.

The joint density uses a diagonal Gaussian kernel whose variances follow
Silverman's rule of thumb; each marginal uses a 1-D Gaussian kernel whose
bandwidth is that dimension's batch standard deviation.  Sums over kernel
terms are done in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .quantizers import SIGMA_FLOOR, LatentBatch
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class SmoothingSpec:
    sigma: Tensor  # marginal bandwidths, shape (n_z,)
    s_diag: Tensor  # joint kernel variances, shape (n_z,)
    mode: str = "silverman"


def silverman_factor(n_b: int, n_z: int) -> float:
    return (4.0 / ((n_z + 2) * n_b)) ** (2.0 / (n_z + 4))


def silverman(sigma, n_b: int, n_z: int, floor: float = SIGMA_FLOOR) -> SmoothingSpec:
    """Joint smoothing variances ``S_jj = (4 / ((n_z + 2) n_b))^(2 / (n_z + 4)) * sigma_j^2``."""
    if n_b < 2:
        raise ValueError(f"Silverman's rule needs n_b >= 2, got {n_b}")
    sigma = T.maximum(T.as_tensor(sigma), floor)
    return SmoothingSpec(sigma, T.square(sigma) * silverman_factor(n_b, n_z), "silverman")


def fixed(h: float, n_z: int, dtype=np.float64) -> SmoothingSpec:
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    return SmoothingSpec(Tensor(np.full(n_z, h, dtype)), Tensor(np.full(n_z, h * h, dtype)), "fixed")


def _pairwise_diff(z: Tensor) -> Tensor:
    n, d = z.shape
    return z.reshape(n, 1, d) - z.reshape(1, n, d)


def kde_log_joint(z: Tensor, spec: SmoothingSpec) -> Tensor:
    """log q(z_i) under the joint KDE of the batch itself (self term included)."""
    n, d = z.shape
    maha = (T.square(_pairwise_diff(z)) / spec.s_diag).sum(axis=-1)
    log_norm = -0.5 * d * LOG_2PI - 0.5 * T.log(spec.s_diag).sum() - math.log(n)
    return T.logsumexp(-0.5 * maha, axis=1) + log_norm


def kde_log_marginals(z: Tensor, spec: SmoothingSpec) -> Tensor:
    """log q_j(z_ij) for every sample and dimension, shape (n_b, n_z)."""
    n, _ = z.shape
    scaled = T.square(_pairwise_diff(z) / spec.sigma)
    return T.logsumexp(-0.5 * scaled, axis=1) - T.log(spec.sigma) - (0.5 * LOG_2PI + math.log(n))


def kde_log_marginal(z: Tensor, j: int, spec: SmoothingSpec) -> Tensor:
    sub = SmoothingSpec(spec.sigma[j : j + 1], spec.s_diag[j : j + 1], spec.mode)
    return kde_log_marginals(z[:, j : j + 1], sub)[:, 0]


def multiinformation(z: Tensor, spec: SmoothingSpec) -> Tensor:
    """Batch estimate of E[log q(z) - sum_j log q_j(z_j)]."""
    if z.shape[0] < 2:
        raise ValueError("multiinformation needs a batch of at least 2")
    return (kde_log_joint(z, spec) - kde_log_marginals(z, spec).sum(axis=1)).mean()


def klm_loss(latents: LatentBatch) -> Tensor:
    """Multiinformation of the quantized latents with Silverman smoothing from the continuous std."""
    n_b, n_z = latents.quantized.shape
    if n_b < 2:
        raise ValueError("klm_loss needs a batch of at least 2")
    return multiinformation(latents.quantized, silverman(latents.sigma, n_b, n_z))


def klm_loss_naive(latents: LatentBatch, h: float = 0.1) -> Tensor:
    """Same estimator with one fixed bandwidth ``h`` for the joint and every marginal."""
    n_b, n_z = latents.quantized.shape
    if n_b < 2:
        raise ValueError("klm_loss needs a batch of at least 2")
    return multiinformation(latents.quantized, fixed(h, n_z, latents.quantized.dtype))
