"""Small image and mask I/O helpers shared by every stage."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Load an image as an ``(H, W, 3)`` uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def read_mask(path: str | os.PathLike) -> np.ndarray:
    """Load a single-channel mask; values >= 128 are foreground."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    pixels = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path, format="PNG")


def image_size(path: str | os.PathLike) -> tuple[int, int]:
    """(H, W) read from the file header without decoding pixels."""
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    if image.shape[:2] == (h, w):
        return image
    return np.array(Image.fromarray(image).resize((w, h), Image.BILINEAR))


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    if mask.shape == (h, w):
        return np.asarray(mask, dtype=bool)
    im = Image.fromarray(np.where(mask, 255, 0).astype(np.uint8))
    return np.asarray(im.resize((w, h), Image.NEAREST)) >= 128
