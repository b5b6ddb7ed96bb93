"""8-bit PNG export of images, policy masks and mixed samples."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image


def to_uint8(arr: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], scale by 255 and round half up."""
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(path, arr: np.ndarray) -> None:
    """Write an (H, W) grayscale or (C, H, W) image with C in {1, 3}."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(to_uint8(arr)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Inverse of :func:`save_png`, returning floats in [0, 1] as (H, W) or (C, H, W)."""
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1) if arr.ndim == 3 else arr


def write_mix_set(out_dir, prefix: str, sources: np.ndarray, masks: np.ndarray, x_mix: np.ndarray) -> list[str]:
    """Save sources, grayscale mask heatmaps and the mix; returns file names."""
    names = []
    for n, (src, mask) in enumerate(zip(sources, masks)):
        for kind, arr in (("src", src), ("mask", mask)):
            name = f"{prefix}_{kind}{n}.png"
            save_png(os.path.join(out_dir, name), arr)
            names.append(name)
    name = f"{prefix}_mix.png"
    save_png(os.path.join(out_dir, name), x_mix)
    names.append(name)
    return names
