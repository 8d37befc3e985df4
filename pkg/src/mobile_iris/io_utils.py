"""File I/O helpers: atomic writes, image/mask files, and resampling."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ImageFormatError

MASK_THRESHOLD = 128


def atomic_write_bytes(path, data: bytes):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _encode_png(array: np.ndarray, mode: str) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(array, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def read_image(path) -> np.ndarray:
    """Load a PNG/BMP as uint8 (H, W, 3); grayscale and palette images are promoted."""
    with Image.open(path) as img:
        if img.mode == "L":
            arr = np.asarray(img, dtype=np.uint8)
            return np.repeat(arr[:, :, None], 3, axis=2)
        if img.mode == "P":
            img = img.convert("RGB")
        if img.mode != "RGB":
            raise ImageFormatError(f"{path}: unsupported pixel format {img.mode!r} (need 8-bit RGB or grayscale)")
        return np.asarray(img, dtype=np.uint8).copy()


def write_image(path, image: np.ndarray):
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"expected uint8 (H, W, 3) image, got {image.dtype} {image.shape}")
    atomic_write_bytes(path, _encode_png(np.ascontiguousarray(image), "RGB"))


def read_mask(path) -> np.ndarray:
    """Read a single-channel 8-bit mask; pixels >= 128 are foreground."""
    with Image.open(path) as img:
        if img.mode != "L":
            raise ImageFormatError(f"{path}: mask must be single-channel 8-bit, got mode {img.mode!r}")
        return np.asarray(img, dtype=np.uint8) >= MASK_THRESHOLD


def write_mask(path, mask: np.ndarray):
    """Write a boolean mask as an 8-bit PNG with 0 background and 255 foreground."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ImageFormatError(f"mask must be 2-D, got shape {mask.shape}")
    atomic_write_bytes(path, _encode_png(np.where(mask.astype(bool), 255, 0).astype(np.uint8), "L"))


# ---------------------------------------------------------------------------
# Resampling (half-pixel centres, matching common image libraries)
# ---------------------------------------------------------------------------

def _linear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(array: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the first two axes; extra trailing axes are carried along."""
    arr = np.asarray(array, dtype=np.float64)
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    lo, hi, fr = _linear_axis(h, out_h)
    fr = fr.reshape((-1,) + (1,) * (arr.ndim - 1))
    rows = arr[lo] * (1 - fr) + arr[hi] * fr
    lo, hi, fr = _linear_axis(w, out_w)
    fr = fr.reshape((1, -1) + (1,) * (arr.ndim - 2))
    return rows[:, lo] * (1 - fr) + rows[:, hi] * fr


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Source index for each output index: floor((i + 0.5) * n_in / n_out), in exact integers."""
    return ((2 * np.arange(n_out) + 1) * n_in) // (2 * n_out)


def resize_nearest(array: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    arr = np.asarray(array)
    h, w = arr.shape[:2]
    return arr[nearest_indices(h, out_h)][:, nearest_indices(w, out_w)]
