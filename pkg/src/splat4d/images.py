"""8-bit PNG i/o for float images in [0, 1]."""

import numpy as np
from PIL import Image

__all__ = ["save_image", "load_image", "psnr"]


def save_image(path, array):
    """Write (H, W, 3) or (H, W, 4) floats in [0, 1] as 8-bit PNG."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ValueError(f"expected (H, W, 3|4) image, got {arr.shape}")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB" if arr.shape[2] == 3 else "RGBA").save(path)


def load_image(path):
    """Read a PNG as float64 in [0, 1]; keeps the alpha channel if present."""
    with Image.open(path) as im:
        mode = "RGBA" if "A" in im.getbands() else "RGB"
        arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    return arr


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB between two float images."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)
