"""Hessian (mixed-derivative) penalties on decoder activations.

Curvature along a direction ``d`` is probed with the central second difference
``(g(z + eps d) - 2 g(z) + g(z - eps d)) / eps^2``, which estimates ``d^T H d``
for every tapped activation at once.  The variance of these probes over
Rademacher directions gives the off-diagonal Hessian mass; with directions
scaled by the latent std, and a Gaussian-direction variance as the
denominator, the ratio becomes the normalized penalty.

A *decoder* here is any callable mapping a latent batch ``Tensor (m, n_z)`` to
a list of tap activations, each ``Tensor (m, D_k)`` (a single Tensor is also
accepted).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .quantizers import LatentBatch
from .tensor import Tensor

DENOM_FLOOR = 1e-12
RMS_FLOOR = 1e-12

Decoder = Callable[[Tensor], "Sequence[Tensor] | Tensor"]


@dataclass
class PerturbationDraw:
    v: Tensor  # (n_p, n_b, n_z), entries +-sigma_j
    w: Tensor  # (n_p, n_b, n_z), entries ~ N(0, sigma_j^2)
    epsilon: float = 0.1

    @property
    def n_p(self) -> int:
        return self.v.shape[0]


def rademacher(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    return (2.0 * rng.integers(0, 2, size=shape) - 1.0).astype(dtype)


def draw_perturbations(rng: np.random.Generator, sigma: Tensor, n_b: int, n_p: int = 2,
                       epsilon: float = 0.1) -> PerturbationDraw:
    """Scale-adjusted Rademacher ``v`` and Gaussian ``w`` directions for every sample."""
    if n_p < 2:
        raise ValueError(f"n_p must be >= 2 to form a variance, got {n_p}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    sigma = T.as_tensor(sigma)
    n_z = sigma.shape[0]
    signs = rademacher(rng, (n_p, n_b, n_z), sigma.dtype)
    normals = rng.standard_normal((n_p, n_b, n_z)).astype(sigma.dtype)
    return PerturbationDraw(sigma * signs, sigma * normals, epsilon)


def _as_taps(out) -> list[Tensor]:
    return [out] if isinstance(out, Tensor) else list(out)


def probe_inputs(z: Tensor, directions: Tensor, epsilon: float) -> Tensor:
    """Stack ``[z; z + eps d_1; ...; z + eps d_M; z - eps d_1; ...; z - eps d_M]``.

    ``directions`` has shape (M, n_b, n_z).
    """
    m, n_b, n_z = directions.shape
    shifted = T.as_tensor(directions) * epsilon
    z3 = z.reshape(1, n_b, n_z)
    plus = (z3 + shifted).reshape(m * n_b, n_z)
    minus = (z3 - shifted).reshape(m * n_b, n_z)
    return T.concat([z, plus, minus], axis=0)


def probe_curvatures(tap: Tensor, n_b: int, m: int, epsilon: float) -> Tensor:
    """Second differences from a tap evaluated on :func:`probe_inputs`, shape (M, n_b, D)."""
    d = tap.shape[1]
    center = tap[:n_b].reshape(1, n_b, d)
    plus = tap[n_b : n_b * (1 + m)].reshape(m, n_b, d)
    minus = tap[n_b * (1 + m) :].reshape(m, n_b, d)
    return (plus - 2.0 * center + minus) * (1.0 / (epsilon * epsilon))


def curvature_probe(decoder: Decoder, z, direction, epsilon: float = 0.1) -> list[Tensor]:
    """``d^T H d`` estimates for every tap dimension at each row of ``z``."""
    z = T.as_tensor(z)
    squeeze = z.ndim == 1
    if squeeze:
        z = z.reshape(1, -1)
    direction = T.as_tensor(direction)
    if direction.ndim == 1:
        direction = T.broadcast_to(direction, z.shape)
    n_b = z.shape[0]
    taps = _as_taps(decoder(probe_inputs(z, direction.reshape(1, *z.shape), epsilon)))
    out = [probe_curvatures(t, n_b, 1, epsilon)[0] for t in taps]
    return [o[0] for o in out] if squeeze else out


def _probe_variance(curv: Tensor) -> Tensor:
    """Unbiased variance over the probe axis, summed over tap dimensions -> (n_b,)."""
    return T.variance(curv, axis=0, ddof=1).sum(axis=-1)


def vanilla_from_taps(taps: Sequence[Tensor], n_b: int, n_p: int, epsilon: float,
                      normalize: bool = False) -> Tensor:
    total = None
    for tap in taps:
        curv = probe_curvatures(tap, n_b, n_p, epsilon)
        if normalize:
            # per-dimension batch RMS of the unperturbed activations
            center = tap[:n_b]
            rms = T.sqrt(T.maximum(T.square(center).mean(axis=0), RMS_FLOOR))
            curv = curv / rms
        term = _probe_variance(curv)
        total = term if total is None else total + term
    return total.mean()


def vanilla_hp_loss(decoder: Decoder, z: Tensor, rng: np.random.Generator, n_p: int = 2,
                    epsilon: float = 0.1, normalize: bool = False) -> Tensor:
    """Hutchinson estimate of ``2 * sum_{j1 != j2} H_{j1 j2}^2`` summed over taps, batch mean."""
    if n_p < 2:
        raise ValueError(f"n_p must be >= 2, got {n_p}")
    z = T.as_tensor(z)
    n_b, n_z = z.shape
    v = Tensor(rademacher(rng, (n_p, n_b, n_z), z.dtype))
    taps = _as_taps(decoder(probe_inputs(z, v, epsilon)))
    return vanilla_from_taps(taps, n_b, n_p, epsilon, normalize)


def nhp_from_taps(taps: Sequence[Tensor], n_b: int, n_p: int, epsilon: float) -> Tensor:
    """Normalized penalty from taps evaluated on ``probe_inputs(z, concat([v, w]), eps)``.

    Numerator and denominator are each summed over all tap dimensions before
    the per-sample division.
    """
    num = den = None
    for tap in taps:
        curv = probe_curvatures(tap, n_b, 2 * n_p, epsilon)
        n_term = _probe_variance(curv[:n_p])
        d_term = _probe_variance(curv[n_p:])
        num = n_term if num is None else num + n_term
        den = d_term if den is None else den + d_term
    return (num / T.maximum(den, DENOM_FLOOR)).mean()


def nhp_loss(decoder: Decoder, latents: LatentBatch, rng: np.random.Generator, n_p: int = 2,
             epsilon: float = 0.1) -> Tensor:
    z = latents.quantized
    n_b = z.shape[0]
    draw = draw_perturbations(rng, latents.sigma, n_b, n_p, epsilon)
    taps = _as_taps(decoder(probe_inputs(z, T.concat([draw.v, draw.w], axis=0), epsilon)))
    return nhp_from_taps(taps, n_b, n_p, epsilon)


# -- exact references (no tape) ---------------------------------------------
def _eval_taps(decoder: Decoder, z: np.ndarray) -> np.ndarray:
    taps = _as_taps(decoder(Tensor(z)))
    return np.concatenate([t.data for t in taps], axis=1)


def _four_point(decoder: Decoder, z: np.ndarray, epsilon: float) -> np.ndarray:
    n = z.size
    eye = np.eye(n) * epsilon
    pts = []
    for a in range(n):
        for b in range(n):
            for sa, sb in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                pts.append(z + sa * eye[a] + sb * eye[b])
    vals = _eval_taps(decoder, np.stack(pts)).reshape(n, n, 4, -1)
    H = (vals[:, :, 0] - vals[:, :, 1] - vals[:, :, 2] + vals[:, :, 3]) / (4.0 * epsilon * epsilon)
    return np.moveaxis(H, -1, 0)


def hessian_oracle(decoder: Decoder, z, k: int | None = None, epsilon: float = 3e-3) -> np.ndarray:
    """Full Hessian of tap dimension ``k`` (all taps if None) by central differences.

    ``H_ab = [g(z+e a+e b) - g(z+e a-e b) - g(z-e a+e b) + g(z-e a-e b)] / (4 e^2)``,
    Richardson-extrapolated over steps ``e`` and ``e/2`` so the truncation
    error is fourth order while the step stays large enough to keep
    cancellation error near 1e-12.  Returns (n_z, n_z), or (D, n_z, n_z)
    when ``k`` is None.
    """
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64).reshape(-1)
    coarse = _four_point(decoder, z, epsilon)
    fine = _four_point(decoder, z, 0.5 * epsilon)
    H = (4.0 * fine - coarse) / 3.0
    return H if k is None else H[k]


def hessian_penalty_exact(H: np.ndarray) -> np.ndarray:
    """``sum_{j1 != j2} H_{j1 j2}^2`` (over the last two axes)."""
    sq = H * H
    return sq.sum(axis=(-2, -1)) - np.trace(sq, axis1=-2, axis2=-1)


def normalized_penalty_exact(H: np.ndarray, sigma) -> np.ndarray:
    """Off-diagonal over total squared mass of ``H_{j1 j2} sigma_j1 sigma_j2``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    scaled = H * sigma[:, None] * sigma[None, :]
    total = (scaled * scaled).sum(axis=(-2, -1))
    return hessian_penalty_exact(scaled) / total


def quadratic_forms(H: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """``d^T H d`` for each row of ``directions``."""
    return np.einsum("ni,ij,nj->n", directions, H, directions)
