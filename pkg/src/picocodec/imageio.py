"""8-bit RGB image I/O (PPM and PNG) through Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

FORMATS = {".ppm": "PPM", ".pnm": "PPM", ".png": "PNG"}


def _format(path) -> str:
    ext = Path(path).suffix.lower()
    if ext not in FORMATS:
        raise ValueError(f"unsupported image extension {ext!r}; use one of {sorted(FORMATS)}")
    return FORMATS[ext]


def read_image(path) -> np.ndarray:
    """``(H, W, 3)`` uint8 array; grey or palette inputs are expanded to RGB."""
    _format(path)
    with Image.open(path) as im:
        if im.mode not in ("RGB", "L", "P"):
            raise ValueError(f"{path}: only 8-bit images are supported (mode {im.mode})")
        return np.array(im.convert("RGB"), dtype=np.uint8)


def write_image(path, image) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected a uint8 (H, W, 3) array, got {image.dtype} {image.shape}")
    Image.fromarray(image, "RGB").save(path, format=_format(path))


def to_unit(image) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0
