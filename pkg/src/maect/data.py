"""Procedurally rendered toy dataset: one shape/texture per class on a random background."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .containers import Dataset

SHAPES = (
    "disk", "square", "triangle", "plus", "ring",
    "hstripes", "vstripes", "checker", "xcross", "diamond",
)


@dataclass(frozen=True)
class ToySpec:
    n_classes: int = 10
    train_per_class: int = 500
    test_per_class: int = 100
    image_size: int = 32
    noise: float = 0.03

    def __post_init__(self):
        if not 1 <= self.n_classes <= len(SHAPES):
            raise ValueError(f"n_classes must lie in [1, {len(SHAPES)}]")

    def to_dict(self) -> dict:
        return asdict(self)


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Soft coverage in [0, 1] for a shape of radius ``r`` centered at the origin."""
    def soft(d):  # d < 0 inside; ~1px antialiasing
        return np.clip(0.5 - d, 0.0, 1.0)

    au, av = np.abs(u), np.abs(v)
    if kind == "disk":
        return soft(np.hypot(u, v) - r)
    if kind == "square":
        return soft(np.maximum(au, av) - 0.8 * r)
    if kind == "triangle":
        # apex at v = -r, base at v = 0.6r (image y grows downward)
        d = np.maximum(v - 0.6 * r, (au * 1.6 - v * 0.8 - 0.8 * r) / np.hypot(1.6, 0.8))
        return soft(d)
    if kind == "plus":
        w = 0.3 * r
        d = np.minimum(np.maximum(au - w, av - r), np.maximum(au - r, av - w))
        return soft(d)
    if kind == "ring":
        return soft(np.abs(np.hypot(u, v) - 0.7 * r) - 0.25 * r)
    box = soft(np.maximum(au, av) - 0.85 * r)
    period = max(r / 2.2, 2.0)
    if kind == "hstripes":
        return box * (np.sin(np.pi * v / period * 2) > 0)
    if kind == "vstripes":
        return box * (np.sin(np.pi * u / period * 2) > 0)
    if kind == "checker":
        return box * ((np.floor(u / period) + np.floor(v / period)) % 2 == 0)
    if kind == "xcross":
        w = 0.22 * r
        d1 = np.abs(u - v) / np.sqrt(2) - w
        d2 = np.abs(u + v) / np.sqrt(2) - w
        return soft(np.maximum(np.minimum(d1, d2), np.maximum(au, av) - 0.85 * r))
    if kind == "diamond":
        return soft((au + av) / np.sqrt(2) - 0.65 * r)
    raise ValueError(f"unknown shape {kind!r}")


# object radius as a fraction of the image, center jitter, background texture amplitude
RADIUS_RANGE = (0.26, 0.40)
CENTER_JITTER = 0.25
BACKGROUND_AMPLITUDE = 0.5
BACKGROUND_BASE = (0.35, 0.75)
OBJECT_LEVEL = 0.03


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-channel random field around a random base color."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    base = np.empty((size, size, 3))
    for ch in range(3):
        freq = rng.uniform(-1.5, 1.5, size=(2, 2))
        phase = rng.uniform(0, 2 * np.pi, size=2)
        field = sum(np.cos(2 * np.pi * (freq[j, 0] * xx + freq[j, 1] * yy) / size + phase[j]) for j in range(2)) / 2
        base[..., ch] = rng.uniform(*BACKGROUND_BASE) + BACKGROUND_AMPLITUDE * field
    return np.clip(base, 0.2, 0.95)


def render(kind: str, size: int, rng: np.random.Generator, noise: float = 0.03) -> np.ndarray:
    """One (size, size, 3) float image in [0, 1].

    Every object is near-black on a lighter, colored background, so neither
    object color nor contrast polarity says anything about the class.
    """
    r = rng.uniform(*RADIUS_RANGE) * size
    cx, cy = size / 2 + rng.uniform(-CENTER_JITTER, CENTER_JITTER, size=2) * size
    base = _background(size, rng)
    fg = np.full(3, OBJECT_LEVEL) + rng.normal(0, 0.03, size=3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    m = _shape_mask(kind, xx - cx, yy - cy, r)[..., None]
    img = base * (1 - m) + fg[None, None, :] * m
    img = img + rng.normal(0, noise, size=img.shape)
    return np.clip(img, 0, 1)


def _render_split(spec: ToySpec, per_class: int, rng: np.random.Generator) -> Dataset:
    n = spec.n_classes * per_class
    labels = np.repeat(np.arange(spec.n_classes), per_class)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, spec.image_size, spec.image_size, 3), dtype=np.uint8)
    for i, c in enumerate(labels):
        img = render(SHAPES[c], spec.image_size, rng, spec.noise)
        images[i] = np.round(img * 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), spec.n_classes)


def generate_toy_dataset(spec: ToySpec, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) pair for a seed."""
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([seed, 7]).spawn(2))
    return _render_split(spec, spec.train_per_class, train_rng), _render_split(spec, spec.test_per_class, test_rng)
