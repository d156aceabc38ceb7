"""Crop & flip augmentation on (H, W, C) float images in [0, 1]."""

from __future__ import annotations

import math

import numpy as np

MODES = ("crop_flip", "none")
CROP_SCALE = (0.2, 1.0)
CROP_RATIO = (3 / 4, 4 / 3)


def hflip(image: np.ndarray) -> np.ndarray:
    return np.asarray(image)[..., :, ::-1, :]


def sample_crop_box(h: int, w: int, rng: np.random.Generator, scale=CROP_SCALE, ratio=CROP_RATIO):
    """(top, left, height, width) of a random resized crop, torchvision-style."""
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fallback: central crop clamped to the allowed aspect range
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (align_corners=False)."""
    h, w = image.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def augment(image: np.ndarray, rng: np.random.Generator, mode: str = "crop_flip",
            flip_p: float = 0.5, scale=CROP_SCALE) -> np.ndarray:
    """Random resized crop back to the input size, then horizontal flip."""
    if mode not in MODES:
        raise ValueError(f"augmentation mode must be one of {MODES}, got {mode!r}")
    image = np.asarray(image, dtype=np.float64)
    if mode == "none":
        return image
    h, w = image.shape[:2]
    top, left, ch, cw = sample_crop_box(h, w, rng, scale)
    out = resize_bilinear(image[top:top + ch, left:left + cw], h, w)
    if rng.random() < flip_p:
        out = hflip(out)
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator, mode: str = "crop_flip",
                  scale=CROP_SCALE) -> np.ndarray:
    if mode == "none":
        return np.asarray(images, dtype=np.float64)
    return np.stack([augment(img, rng, mode, scale=scale) for img in images])
