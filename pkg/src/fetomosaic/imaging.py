"""Image containers and PNG input/output.

Images are plain float64 numpy arrays with values in [0, 1], shaped
``(H, W)`` for grayscale or ``(H, W, 3)`` for colour.  Masks are boolean
``(H, W)`` arrays.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import EmptyImage, FormatError

LUMA = np.array([0.299, 0.587, 0.114])


def as_image(data) -> np.ndarray:
    img = np.asarray(data, dtype=float)
    if img.size == 0:
        raise EmptyImage("image has zero size")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise FormatError(f"unsupported image shape {img.shape}")
    return img


def channels(img: np.ndarray) -> int:
    return 1 if img.ndim == 2 else img.shape[2]


def luminance(img: np.ndarray) -> np.ndarray:
    img = as_image(img)
    if img.ndim == 2:
        return img
    return img @ LUMA


def circular_fov(height: int, width: int, margin: float = 0.0) -> np.ndarray:
    """Boolean disc inscribed in the frame (``margin`` pixels inside the edge)."""
    yy, xx = np.mgrid[0:height, 0:width]
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    r = min(height, width) / 2.0 - margin
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(img) if img.dtype != np.uint8 else img
    PILImage.fromarray(arr).save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    """Load an 8-bit PNG as floats in [0, 1] (1 or 3 channels)."""
    try:
        with PILImage.open(path) as im:
            if im.mode == "RGBA":
                im = im.convert("RGB")
            elif im.mode not in ("L", "RGB"):
                im = im.convert("L")
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    return as_image(arr.astype(float) / 255.0)


def save_mask(path, mask: np.ndarray) -> None:
    save_png(path, np.asarray(mask, dtype=np.uint8) * 255)


def load_mask(path) -> np.ndarray:
    """Single-channel PNG, nonzero = True."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 0


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray, eps: float = 1e-9):
    """Sample ``img`` at float coordinates; returns ``(values, valid)``.

    A sample is valid when every tap carrying non-zero weight lies inside
    the image, i.e. ``0 <= x <= W-1`` and ``0 <= y <= H-1``.  Invalid samples
    are returned as 0.
    """
    h, w = img.shape[:2]
    valid = (x >= -eps) & (x <= w - 1 + eps) & (y >= -eps) & (y <= h - 1 + eps)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    vmask = valid[..., None] if img.ndim == 3 else valid
    return np.where(vmask, out, 0.0), valid
