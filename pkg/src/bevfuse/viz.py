"""BEV feature heatmaps as portable graymaps."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def reduce_channels(bev: np.ndarray, how: str = "l2") -> np.ndarray:
    if how == "l2":
        return np.sqrt((bev ** 2).sum(axis=0))
    if how == "max":
        return np.abs(bev).max(axis=0)
    raise ValueError(f"unknown reduction {how!r}")


def heatmap(bev: np.ndarray, how: str = "l2") -> np.ndarray:
    """``[C, H, W]`` -> ``uint8 [H, W]``, min-max normalized; a flat map is all black."""
    mag = reduce_channels(np.asarray(bev, dtype=np.float64), how)
    lo, hi = mag.min(), mag.max()
    if hi <= lo:
        return np.zeros(mag.shape, dtype=np.uint8)
    return np.round(255.0 * (mag - lo) / (hi - lo)).astype(np.uint8)


def dump_bev_heatmap(bev: np.ndarray, path: str | Path, how: str = "l2") -> np.ndarray:
    """Write a binary PGM (P5); row 0 is the first BEV row."""
    img = heatmap(bev, how)
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return img


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    W, H = int(tokens[1]), int(tokens[2])
    # exactly one whitespace byte separates the header from the raster
    return np.frombuffer(blob, dtype=np.uint8, count=W * H, offset=pos + 1).reshape(H, W)
