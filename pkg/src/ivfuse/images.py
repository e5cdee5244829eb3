"""8-bit image file handling (PNG/PGM/PPM via Pillow).

Loaded pixels map to [0, 1] float64 arrays: grayscale files become (1, H, W),
color files (3, H, W).  Saving quantizes [0, 1] arrays back to 8 bits with
rounding, so a save/load round trip moves any pixel by at most 1/255.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageError(ValueError):
    """An image file cannot be read or written."""


def load_image(path):
    """[0, 1] array, (1, H, W) for grayscale or (3, H, W) for color."""
    try:
        with Image.open(path) as img:
            if img.mode == "L":
                arr = np.asarray(img, dtype=np.float64)[None]
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)
    except FileNotFoundError:
        raise ImageError(f"image not found: {path}") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageError(f"cannot read image {path}: {exc}") from None
    return arr / 255.0


def save_image(img01, path):
    """Write a [0, 1] (1|3, H, W) array as an 8-bit grayscale/RGB file."""
    arr = np.asarray(img01, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ImageError(f"save_image expects (1|3, H, W); got shape {arr.shape}")
    quant = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        pil = Image.fromarray(quant[0], mode="L")
    else:
        pil = Image.fromarray(quant.transpose(1, 2, 0), mode="RGB")
    try:
        pil.save(path)
    except (OSError, ValueError) as exc:
        raise ImageError(f"cannot write image {path}: {exc}") from None


def to_visible(img):
    """Coerce a loaded image to 3 channels (grayscale is replicated)."""
    if img.shape[0] == 3:
        return img
    return np.repeat(img, 3, axis=0)
