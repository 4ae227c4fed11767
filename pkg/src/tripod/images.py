"""Binary PGM (P5) / PPM (P6) writers and a reader for round-trip checks."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _header(magic: str, w: int, h: int, comment: str | None) -> bytes:
    lines = [magic]
    if comment:
        lines += [f"# {line}" for line in comment.splitlines()]
    lines += [f"{w} {h}", "255"]
    return ("\n".join(lines) + "\n").encode()


def write_pgm(path, img: np.ndarray, comment: str | None = None) -> None:
    """Grayscale image with values in [0, 1]; ``comment`` goes into the header."""
    data = _to_bytes(img)
    if data.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {data.shape}")
    h, w = data.shape
    Path(path).write_bytes(_header("P5", w, h, comment) + data.tobytes())


def write_ppm(path, img: np.ndarray, comment: str | None = None) -> None:
    """RGB image (H, W, 3) with values in [0, 1]."""
    data = _to_bytes(img)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) array, got {data.shape}")
    h, w, _ = data.shape
    Path(path).write_bytes(_header("P6", w, h, comment) + data.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    body = raw[pos + 1 :]
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    channels = 3 if magic == b"P6" else 1
    arr = np.frombuffer(body[: w * h * channels], dtype=np.uint8).astype(np.float64) / maxval
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def upscale(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def heatmap_rgb(matrix: np.ndarray, inactive: np.ndarray | None = None, cell: int = 16) -> np.ndarray:
    """White-to-blue heatmap of values in [0, 1]; inactive columns get a red top bar."""
    m = np.clip(np.asarray(matrix, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([1.0 - m, 1.0 - m, np.ones_like(m)], axis=-1)
    out = upscale(rgb, cell)
    if inactive is not None:
        for j in np.flatnonzero(inactive):
            out[: max(1, cell // 4), j * cell : (j + 1) * cell] = (1.0, 0.0, 0.0)
    return out
