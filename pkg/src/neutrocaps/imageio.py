"""PNG reading/writing and resizing for RGB images and binary masks."""

from __future__ import annotations

import io
import os

import numpy as np
from PIL import Image

from .autodiff.serialize import atomic_write_bytes
from .errors import DataError, ShapeError


def read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def read_mask(path) -> np.ndarray:
    """Single-channel PNG with {0, 255} (any nonzero counts as foreground) -> {0, 1}."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return (arr > 127).astype(np.uint8)


def _png_bytes(arr: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def write_rgb(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 image, got {image.shape}")
    atomic_write_bytes(path, _png_bytes(np.ascontiguousarray(image, dtype=np.uint8), "RGB"))


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"expected HxW mask, got {mask.shape}")
    atomic_write_bytes(path, _png_bytes(((mask > 0) * 255).astype(np.uint8), "L"))


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize an HxWx3 uint8 image to ``size`` = (height, width)."""
    h, w = size
    if image.shape[:2] == (h, w):
        return image.copy()
    im = Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8))
    return np.asarray(im.resize((w, h), Image.BILINEAR), dtype=np.uint8)


def nearest_indices(src: int, dst: int) -> np.ndarray:
    """Source index sampled by each destination index (pixel-centre alignment)."""
    idx = np.floor((np.arange(dst) + 0.5) * (src / dst)).astype(np.int64)
    return np.clip(idx, 0, src - 1)


def resize_nearest(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of the first two axes to ``size`` = (height, width)."""
    h, w = size
    rows = nearest_indices(arr.shape[0], h)
    cols = nearest_indices(arr.shape[1], w)
    return arr[rows[:, None], cols[None, :]]


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return os.fspath(path)
