"""Scalar latent quantizers: fixed-grid FSQ and a learned per-dimension codebook."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class FsqSpec:
    n_z: int
    n_q: int = 12

    def __post_init__(self):
        if self.n_q < 2:
            raise ValueError(f"n_q must be >= 2, got {self.n_q}")

    @property
    def grid(self) -> np.ndarray:
        """The per-dimension codebook, uniformly spaced with endpoints exactly -1 and 1."""
        return 2.0 * np.arange(self.n_q) / (self.n_q - 1) - 1.0


@dataclass
class LatentBatch:
    """Continuous latents ``c``, quantized latents ``z`` and per-dimension std ``sigma``.

    ``codes`` is only set by the learned-codebook quantizer: the selected
    codebook entries as a function of the codebook (no straight-through path).
    """

    continuous: Tensor
    quantized: Tensor
    sigma: Tensor
    codes: Tensor | None = None

    @property
    def n_b(self) -> int:
        return self.quantized.shape[0]

    @property
    def n_z(self) -> int:
        return self.quantized.shape[1]


def latent_sigma(c: Tensor, floor: float = SIGMA_FLOOR) -> Tensor:
    """Per-dimension std of a batch (divisor n_b), floored so it stays positive."""
    var = T.variance(c, axis=0, ddof=0)
    # clamping the variance (not the std) keeps sqrt away from its infinite slope at 0
    return T.sqrt(T.maximum(var, floor * floor))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def fsq_values(c: np.ndarray, n_q: int) -> np.ndarray:
    """Snap values in [-1, 1] onto the ``n_q``-point grid."""
    k = round_half_away((n_q - 1) / 2.0 * (c + 1.0))
    return 2.0 * k / (n_q - 1) - 1.0


def fsq_quantize(c_pre: Tensor, spec: FsqSpec) -> LatentBatch:
    """tanh-bound the encoder output, round onto the fixed grid, straight-through gradients."""
    if not np.isfinite(c_pre.data).all():
        raise T.NumericalError("non-finite encoder output")
    c = T.tanh(c_pre)
    z = T.straight_through(c, fsq_values(c.data, spec.n_q))
    return LatentBatch(c, z, latent_sigma(c))


class LearnedCodebook:
    """Per-dimension learnable scalar codebooks, shape ``(n_z, n_v)``."""

    def __init__(self, n_z: int, n_v: int = 12, dtype=np.float64):
        if n_v < 1:
            raise ValueError("empty codebook")
        grid = np.linspace(-1.0, 1.0, n_v) if n_v > 1 else np.zeros(1)
        self.values = Tensor(np.tile(grid, (n_z, 1)).astype(dtype), requires_grad=True)

    @property
    def n_z(self) -> int:
        return self.values.shape[0]

    @property
    def n_v(self) -> int:
        return self.values.shape[1]


def nearest_code_index(c: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook value per (sample, dim); ties go to the lower index."""
    dist = np.abs(c[:, :, None] - values[None, :, :])
    return np.argmin(dist, axis=-1)


def lq_quantize(c: Tensor, book: LearnedCodebook) -> LatentBatch:
    if book.n_v == 0:
        raise ValueError("empty codebook")
    if c.shape[1] != book.n_z:
        raise T.ShapeError(f"latent width {c.shape[1]} != codebook rows {book.n_z}")
    idx = nearest_code_index(c.data, book.values.data)
    # codes[i, j] = values[j, idx[i, j]]
    codes = T.take_along_axis(book.values, idx.T, axis=1).T
    z = T.straight_through(c, codes.data)
    return LatentBatch(c, z, latent_sigma(c), codes=codes)


def lq_losses(c: Tensor, z: Tensor) -> tuple[Tensor, Tensor]:
    """Codebook (quantize) and commitment losses, squared norm averaged over the batch.

    ``z`` should be the codebook-tracked codes; only the codebook learns from the
    first loss and only the encoder from the second.
    """
    if c.shape != z.shape:
        raise T.ShapeError(f"{c.shape} vs {z.shape}")
    quantize = T.square(T.stop_gradient(c) - z).sum(axis=-1).mean()
    commit = T.square(c - T.stop_gradient(z)).sum(axis=-1).mean()
    return quantize, commit
