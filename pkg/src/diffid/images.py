"""PNG round-tripping and resizing for channel-first float images in [0, 1]."""

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgument


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(C, H, W) floats in [0, 1] -> (H, W, C) uint8."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise InvalidArgument(f"expected (C, H, W) with 1 or 3 channels, got {img.shape}")
    clipped = np.clip(img, 0.0, 1.0)
    return np.round(clipped * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64).transpose(2, 0, 1) / 255.0


def resize(image: np.ndarray, size) -> np.ndarray:
    """Bilinear resize to (height, width), staying channel-first float."""
    h, w = int(size[0]), int(size[1])
    arr = to_uint8(image)
    mode = "RGB" if arr.shape[2] == 3 else "L"
    pil = Image.fromarray(arr.squeeze() if mode == "L" else arr, mode=mode)
    out = np.asarray(pil.resize((w, h), Image.BILINEAR))
    return from_uint8(out)


def save_png(image: np.ndarray, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(image)
    mode = "RGB" if arr.shape[2] == 3 else "L"
    Image.fromarray(arr.squeeze() if mode == "L" else arr, mode=mode).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as pil:
        return from_uint8(np.asarray(pil.convert("RGB")))
