"""Procedural datasets with independent discrete sources and a deterministic renderer."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .images import write_pgm


def render_blob(s, size: int = 16) -> np.ndarray:
    """One axis-aligned square on a black background.

    Sources: x-position (8), y-position (8), size (4), intensity (4).  The
    square is centred at ``(4 + x, 4 + y)`` with half-width ``1 + size`` and
    brightness ``(1 + intensity) / 4``; the largest square at the far corner
    still fits in a 16x16 frame.
    """
    sx, sy, ss, si = (int(v) for v in s)
    img = np.zeros((size, size))
    half = 1 + ss
    cx, cy = 4 + sx, 4 + sy
    img[cy - half : cy + half + 1, cx - half : cx + half + 1] = (1 + si) / 4.0
    return img


def render_two_blob(s, size: int = 16) -> np.ndarray:
    """Two squares, one per half of the frame, so they never overlap.

    Sources: left x (4), left y (6), left size (2), right x (4), right y (6),
    right size (2).  Left square is white, right square is grey (0.6).
    """
    lx, ly, ls, rx, ry, rs = (int(v) for v in s)
    img = np.zeros((size, size))
    for x0, y, side, level in ((lx, ly, 2 + ls, 1.0), (8 + rx, ry, 2 + rs, 0.6)):
        img[2 + y : 2 + y + side, x0 : x0 + side] = level
    return img


RENDERERS: dict[str, Callable[..., np.ndarray]] = {"blob": render_blob, "two_blob": render_two_blob}


@dataclass(frozen=True)
class SyntheticProcess:
    name: str
    sources: tuple[tuple[str, int], ...]
    renderer: str
    image_size: int = 16

    @property
    def n_s(self) -> int:
        return len(self.sources)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(card for _, card in self.sources)

    @property
    def n_configs(self) -> int:
        return int(np.prod(self.cardinalities))

    def render(self, s) -> np.ndarray:
        return RENDERERS[self.renderer](s, self.image_size)


BLOB = SyntheticProcess("blob", (("x", 8), ("y", 8), ("size", 4), ("intensity", 4)), "blob")
TWO_BLOB = SyntheticProcess(
    "two_blob",
    (("left_x", 4), ("left_y", 6), ("left_size", 2), ("right_x", 4), ("right_y", 6), ("right_size", 2)),
    "two_blob",
)
PROCESSES = {p.name: p for p in (BLOB, TWO_BLOB)}


def get_process(name: str) -> SyntheticProcess:
    try:
        return PROCESSES[name]
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(PROCESSES)}") from None


def sample_sources(proc: SyntheticProcess, rng: np.random.Generator, n: int) -> np.ndarray:
    cols = [rng.integers(0, card, size=n) for card in proc.cardinalities]
    return np.stack(cols, axis=1)


def sample_pair(proc: SyntheticProcess, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = sample_sources(proc, rng, 1)[0]
    return s, proc.render(s)


def enumerate_all(proc: SyntheticProcess) -> tuple[np.ndarray, np.ndarray]:
    """Every source configuration (row-major over sources) with its image."""
    s = np.array(list(itertools.product(*(range(c) for c in proc.cardinalities))), dtype=np.int64)
    x = np.stack([proc.render(row) for row in s])
    return s, x


@dataclass
class Dataset:
    """A fully enumerated process, flattened for the MLP autoencoder."""

    process: SyntheticProcess
    sources: np.ndarray = field(repr=False)
    images: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, proc: SyntheticProcess | str) -> "Dataset":
        if isinstance(proc, str):
            proc = get_process(proc)
        s, x = enumerate_all(proc)
        return cls(proc, s, x)

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)

    def __len__(self) -> int:
        return len(self.sources)


def dump(proc: SyntheticProcess, out_dir: str | Path) -> Path:
    """Write every image as PGM plus a ``labels.csv`` of source values."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s, x = enumerate_all(proc)
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file"] + [name for name, _ in proc.sources])
        for i, (row, img) in enumerate(zip(s, x)):
            fname = f"{i:06d}.pgm"
            write_pgm(out / fname, img)
            writer.writerow([fname] + [int(v) for v in row])
    return out
