"""Binary PPM/PGM image files (8-bit)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["write_ppm", "read_ppm"]


def write_ppm(path, img: np.ndarray) -> None:
    """img: (3, h, w) float in [0, 1] or uint8."""
    if img.dtype != np.uint8:
        img = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.moveaxis(img, 0, -1).tobytes())


def read_ppm(path) -> np.ndarray:
    """Returns (3, h, w) float64 in [0, 1]."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    raw = np.frombuffer(data, dtype=np.uint8, count=3 * h * w, offset=pos)
    return np.moveaxis(raw.reshape(h, w, 3), -1, 0).astype(np.float64) / maxval
