"""File formats: raw float arrays, 16-bit PGM previews, mask files."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_raw(path, arr) -> None:
    """One text header line ``height width channels`` followed by little-endian float64."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        shape = (1, arr.shape[0], 1)
    elif arr.ndim == 2:
        shape = (arr.shape[0], arr.shape[1], 1)
    elif arr.ndim == 3:
        shape = arr.shape
    else:
        raise ValueError("raw files hold at most 3-D arrays")
    with open(path, "wb") as fh:
        fh.write(f"{shape[0]} {shape[1]} {shape[2]}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        h, w, c = (int(v) for v in header)
        data = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if data.size != h * w * c:
        raise ValueError(f"{path}: expected {h * w * c} values, found {data.size}")
    return data.reshape(h, w, c) if c > 1 else data.reshape(h, w)


def write_pgm16(path, img, lo: float = 0.0, hi: float = 1.0) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    q = np.round(scaled * 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.frombuffer(raw[pos:], dtype=">u2").reshape(h, w).astype(np.float64) / maxval


def read_mask(path, shape):
    """Parse a mask file: kept indices (whitespace separated) or ``box x0 y0 w h``.

    Returns ``("indices", array)`` or ``("box", (x0, y0, w, h))``.
    """
    text = Path(path).read_text().split()
    if text and text[0] == "box":
        x0, y0, w, h = (int(v) for v in text[1:5])
        return "box", (x0, y0, w, h)
    return "indices", np.array([int(v) for v in text], dtype=np.int64)


def write_mask_indices(path, kept) -> None:
    Path(path).write_text("\n".join(str(int(k)) for k in kept) + "\n")
