"""Attribution heatmaps as binary PPM images.

Rows are AUs in catalog order (upper face on top), columns are frames. The
colour scale is blue-white-red, symmetric around zero and anchored at the
largest absolute attribution of the map. A black line marks the boundary
between the upper and lower AU blocks.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import AU_IDS, N_FRAMES, UPPER_AUS

WHITE = np.array([255.0, 255.0, 255.0])
RED = np.array([178.0, 24.0, 43.0])
BLUE = np.array([33.0, 102.0, 172.0])


def colorize(values: np.ndarray) -> np.ndarray:
    """Map a signed array to uint8 RGB; zero is white, +max red, -max blue."""
    values = np.asarray(values, dtype=np.float64)
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    t = values / peak if peak > 0 else np.zeros_like(values)
    t = np.clip(t, -1.0, 1.0)[..., None]
    rgb = np.where(t >= 0, WHITE + t * (RED - WHITE), WHITE - t * (BLUE - WHITE))
    return np.rint(rgb).astype(np.uint8)


def render(values: np.ndarray, cell: int = 8) -> np.ndarray:
    """(17*cell, 87*cell, 3) uint8 image of one attribution map."""
    values = np.asarray(values)
    if values.shape != (len(AU_IDS), N_FRAMES):
        raise ValueError(f"attribution map must be ({len(AU_IDS)}, {N_FRAMES}), got {values.shape}")
    if cell < 1:
        raise ValueError("cell size must be >= 1 pixel")
    img = np.repeat(np.repeat(colorize(values), cell, axis=0), cell, axis=1)
    # separator: first pixel row of the lower block
    img[len(UPPER_AUS) * cell, :, :] = 0
    return img


def write_ppm(path, img: np.ndarray) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header is four whitespace-separated tokens; pixel bytes start after one more whitespace byte
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1).reshape(h, w, 3)


def save_heatmap(path, values: np.ndarray, cell: int = 8) -> None:
    write_ppm(path, render(values, cell))
