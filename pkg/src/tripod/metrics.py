"""Disentanglement metrics: NMI heatmap, InfoM/InfoC/InfoE, DCI, active latents.

InfoM and InfoC use a ratio-to-uniform form over the normalized mutual
information heatmap; D and C are entropy-based over random-forest feature
importances.  Both are stand-ins for the published metric implementations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.ensemble import RandomForestClassifier
from sklearn.linear_model import LogisticRegression

from .tensor import Tensor, _stable_sigmoid

log = logging.getLogger(__name__)

MI_SLACK = 1e-9
MI_ZERO = 1e-12
N_BINS = 20
ACTIVE_STD = 1e-3
HELDOUT_FRACTION = 0.2
# Splits whose weighted Gini decrease is below this are treated as noise.
IMPURITY_GATE = 1e-2


def _codes(a: np.ndarray) -> tuple[np.ndarray, int]:
    """Relabel a discrete vector as 0..k-1."""
    uniq, inv = np.unique(np.asarray(a), return_inverse=True)
    return inv.reshape(-1), len(uniq)


def entropy(a: np.ndarray) -> float:
    """Plug-in entropy in nats."""
    a, k = _codes(a)
    if a.size == 0:
        raise ValueError("empty input")
    p = np.bincount(a, minlength=k) / a.size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def plugin_mi(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information I(a; b) in nats from the joint histogram."""
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty input")
    if a.size != b.size:
        raise ValueError("inputs must be paired")
    ai, ka = _codes(a)
    bi, kb = _codes(b)
    joint = np.bincount(ai * kb + bi, minlength=ka * kb).reshape(ka, kb) / a.size
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())
    return 0.0 if abs(mi) < MI_ZERO else max(mi, 0.0)


def discretize(latents: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """Equal-width histogram bins per column (for continuous latents)."""
    latents = np.asarray(latents, dtype=np.float64)
    out = np.zeros(latents.shape, dtype=np.int64)
    for j in range(latents.shape[1]):
        col = latents[:, j]
        lo, hi = col.min(), col.max()
        if hi > lo:
            out[:, j] = np.minimum(((col - lo) / (hi - lo) * n_bins).astype(np.int64), n_bins - 1)
    return out


def active_latents(quantized: np.ndarray, continuous: np.ndarray | None = None) -> np.ndarray:
    """A latent is active if it takes at least two quantized values and its continuous std exceeds 1e-3."""
    quantized = np.asarray(quantized)
    mask = np.array([len(np.unique(quantized[:, j])) >= 2 for j in range(quantized.shape[1])])
    if continuous is not None:
        mask &= np.asarray(continuous).std(axis=0) > ACTIVE_STD
    return mask


@dataclass
class NmiHeatmap:
    matrix: np.ndarray  # (n_s, n_z)
    active: np.ndarray  # (n_z,) bool

    @property
    def n_s(self) -> int:
        return self.matrix.shape[0]


def nmi_heatmap(sources: np.ndarray, latents: np.ndarray, continuous: np.ndarray | None = None,
                quantized: bool = True) -> NmiHeatmap:
    """``m_ij = I(s_i; z_j) / H(s_i)``.

    ``latents`` are used as discrete codes when ``quantized``; otherwise they
    are binned into 20 equal-width bins first.
    """
    sources = np.asarray(sources)
    codes = np.asarray(latents) if quantized else discretize(latents)
    n_s, n_z = sources.shape[1], codes.shape[1]
    m = np.zeros((n_s, n_z))
    for i in range(n_s):
        h = entropy(sources[:, i])
        for j in range(n_z):
            m[i, j] = plugin_mi(sources[:, i], codes[:, j]) / h if h > 0 else 0.0
    active = active_latents(latents, continuous if continuous is not None else (latents if not quantized else None))
    return NmiHeatmap(m, active)


def _ratio_score(block: np.ndarray, axis: int) -> float:
    """Mean over slices of (n r - 1) / (n - 1) with r the max share along ``axis``."""
    n = block.shape[axis]
    if n == 0:
        return 0.0
    if n == 1:
        return 1.0
    totals = block.sum(axis=axis)
    peaks = block.max(axis=axis)
    share = np.where(totals > 0, peaks / np.where(totals > 0, totals, 1.0), 1.0 / n)
    return float(np.clip((n * share - 1.0) / (n - 1.0), 0.0, 1.0).mean())


def info_modularity(h: NmiHeatmap) -> float:
    """Per active latent, how concentrated its information is on a single source."""
    block = h.matrix[:, h.active]
    if block.shape[1] == 0:
        return 0.0
    return _ratio_score(block, axis=0)


def info_compactness(h: NmiHeatmap) -> float:
    """Per source, how concentrated its information is on a single active latent."""
    block = h.matrix[:, h.active]
    if block.shape[1] == 0:
        return 0.0
    return _ratio_score(block, axis=1)


def _split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(HELDOUT_FRACTION * n)))
    return perm[n_test:], perm[:n_test]


def _normalized_accuracy(acc: float, n_classes: int) -> float:
    chance = 1.0 / n_classes
    if n_classes < 2:
        return 1.0
    return float(np.clip((acc - chance) / (1.0 - chance), 0.0, 1.0))


def info_explicitness(sources: np.ndarray, latents: np.ndarray, seed: int = 0) -> float:
    """Held-out accuracy of a multinomial logistic probe per source, rescaled against chance."""
    sources = np.asarray(sources)
    x = np.asarray(latents, dtype=np.float64)
    scale = x.std(axis=0)
    x = (x - x.mean(axis=0)) / np.where(scale > 0, scale, 1.0)
    train, test = _split(len(x), seed)
    scores = []
    for i in range(sources.shape[1]):
        y = sources[:, i]
        k = len(np.unique(y))
        if k < 2:
            scores.append(1.0)
            continue
        if len(np.unique(y[train])) < 2:
            scores.append(0.0)
            continue
        probe = LogisticRegression(C=1e4, max_iter=2000, tol=1e-8)
        probe.fit(x[train], y[train])
        scores.append(_normalized_accuracy(probe.score(x[test], y[test]), k))
    return float(np.mean(scores))


def importance_matrix(sources: np.ndarray, latents: np.ndarray, seed: int = 0) -> tuple[np.ndarray, float]:
    """Random-forest impurity importances R (n_z, n_s) and the mean normalized held-out accuracy."""
    sources = np.asarray(sources)
    x = np.asarray(latents, dtype=np.float64)
    n_z, n_s = x.shape[1], sources.shape[1]
    train, test = _split(len(x), seed)
    R = np.zeros((n_z, n_s))
    accs = []
    for i in range(n_s):
        y = sources[:, i]
        k = len(np.unique(y))
        forest = RandomForestClassifier(n_estimators=20, max_depth=8, max_features="sqrt", bootstrap=True,
                                        min_impurity_decrease=IMPURITY_GATE, random_state=seed + i)
        forest.fit(x[train], y[train])
        imp = forest.feature_importances_
        if np.isfinite(imp).all() and imp.sum() > 0:
            R[:, i] = imp / imp.sum()
        accs.append(_normalized_accuracy(forest.score(x[test], y[test]), k))
    return R, float(np.mean(accs))


def _normalized_entropy_score(p: np.ndarray, n: int) -> float:
    if n < 2:
        return 1.0
    p = p[p > 0]
    return float(1.0 - (-(p * np.log(p)).sum()) / math.log(n))


def dci_from_importance(R: np.ndarray) -> tuple[float, float]:
    """Disentanglement and completeness from an (n_z, n_s) importance matrix."""
    R = np.abs(np.asarray(R, dtype=np.float64))
    n_z, n_s = R.shape
    total = R.sum()
    if total <= 0:
        return 0.0, 0.0
    rows = R.sum(axis=1)
    d_scores = np.array([_normalized_entropy_score(R[j] / rows[j], n_s) if rows[j] > 0 else 0.0 for j in range(n_z)])
    D = float((d_scores * rows / total).sum())
    cols = R.sum(axis=0)
    c_scores = [_normalized_entropy_score(R[:, i] / cols[i], n_z) if cols[i] > 0 else 0.0 for i in range(n_s)]
    C = float(np.mean(c_scores))
    return float(np.clip(D, 0.0, 1.0)), float(np.clip(C, 0.0, 1.0))


def dci(sources: np.ndarray, latents: np.ndarray, seed: int = 0) -> tuple[float, float, float]:
    R, informativeness = importance_matrix(sources, latents, seed)
    D, C = dci_from_importance(R)
    return D, C, informativeness


@dataclass
class MetricsReport:
    InfoM: float
    InfoC: float
    InfoE: float
    D: float
    C: float
    I: float
    psnr: float
    step: int = 0
    n_active: int = 0

    def __post_init__(self):
        for name in ("InfoM", "InfoC", "InfoE", "D", "C", "I"):
            value = getattr(self, name)
            if not (math.isfinite(value) and 0.0 <= value <= 1.0):
                raise ValueError(f"{name}={value} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_latents(sources: np.ndarray, continuous: np.ndarray, quantized: np.ndarray, psnr: float,
                     step: int = 0, seed: int = 0, full: bool = True) -> tuple[MetricsReport | dict, NmiHeatmap]:
    """All metrics for one set of latents.  ``full=False`` skips the trained probes (InfoM/InfoC/PSNR only)."""
    h = nmi_heatmap(sources, quantized, continuous)
    info_m, info_c = info_modularity(h), info_compactness(h)
    if not full:
        return {"InfoM": info_m, "InfoC": info_c, "psnr": psnr, "n_active": int(h.active.sum())}, h
    info_e = info_explicitness(sources, continuous, seed)
    d, c, i = dci(sources, continuous, seed)
    return MetricsReport(info_m, info_c, info_e, d, c, i, psnr, step, int(h.active.sum())), h


# -- traversals ----------------------------------------------------------------
def occupied_range(quantized: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-latent min and max code seen on an evaluation set."""
    quantized = np.asarray(quantized)
    return quantized.min(axis=0), quantized.max(axis=0)


def traversal_grid(model, probe: np.ndarray, j: int, n_steps: int, z_range: tuple[float, float]) -> np.ndarray:
    """Decoded images with latent ``j`` of ``probe`` swept linearly over ``z_range``; shape (n_steps, H, W).

    ``model`` needs ``latents``, ``decode`` and ``n_x``; images are assumed square.
    """
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    _, z = model.latents(np.asarray(probe, dtype=np.float64).reshape(1, -1))
    zs = np.repeat(z, n_steps, axis=0)
    zs[:, j] = np.linspace(z_range[0], z_range[1], n_steps)
    side = int(round(math.sqrt(model.n_x)))
    pixels = _stable_sigmoid(model.decode(Tensor(zs.astype(z.dtype))).data)
    return pixels.reshape(n_steps, side, side)


def traversal_image(model, probe: np.ndarray, quantized: np.ndarray, active: np.ndarray, n_steps: int = 8,
                    pad: int = 1) -> tuple[np.ndarray, list[int]]:
    """Rows of traversals for every active latent, tiled into one grayscale image.

    Returns the image and the latent index of each row.
    """
    lo, hi = occupied_range(quantized)
    rows = [int(j) for j in np.flatnonzero(active)]
    side = int(round(math.sqrt(model.n_x)))
    cell = side + pad
    img = np.zeros((max(len(rows), 1) * cell + pad, n_steps * cell + pad))
    for r, j in enumerate(rows):
        for c, tile in enumerate(traversal_grid(model, probe, j, n_steps, (lo[j], hi[j]))):
            img[pad + r * cell : pad + r * cell + side, pad + c * cell : pad + c * cell + side] = tile
    return img, rows
