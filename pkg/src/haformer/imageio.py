"""Binary PPM in, binary PGM label maps out."""

from __future__ import annotations

import io

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageFormatError(ValueError):
    pass


def read_ppm(path) -> np.ndarray:
    """Binary P6 file as a float32 ``[3, H, W]`` array scaled to [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P6"):
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageFormatError(f"{path}: malformed PPM ({exc})") from None
    arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return (arr / 255.0).transpose(2, 0, 1).copy()


def write_ppm(path, image):
    """Inverse of :func:`read_ppm` for 8-bit images."""
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PPM")


def write_pgm(path, labels):
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("label ids must fit in one byte")
    Image.fromarray(labels.astype(np.uint8), "L").save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.format != "PPM" or img.mode != "L":
            raise ImageFormatError(f"{path}: not an 8-bit PGM")
        return np.asarray(img).copy()
