"""Image buffers and binary PPM (P6) input/output.

PPM is the golden-file format for bit-exact comparisons: quantization is
round-half-up of 255 * clamped value, so identical float images always
serialize to identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class ImageBuffer:
    """RGB samples in [0,1], row-major [H,W,3], plus the per-pixel final
    transmittance when the rasterizer produced the image."""

    data: np.ndarray
    transmittance: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("image data must have shape [H,W,3]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def quantize(img: np.ndarray) -> np.ndarray:
    """[0,1] floats to uint8 by round-half-up of 255*value."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(img: ImageBuffer | np.ndarray, path: str | Path) -> None:
    data = img.data if isinstance(img, ImageBuffer) else np.asarray(img)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantize(data).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 file back to [H,W,3] float64 in [0,1]."""
    with open(path, "rb") as f:
        raw = f.read()
    # Header: magic, width, height, maxval -- whitespace separated, with
    # optional '#' comment lines.
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM file: {path}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError("only maxval 255 PPM is supported")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0
