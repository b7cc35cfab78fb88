"""Procedural image sources for training and evaluation.

All generators are pure functions of the supplied ``numpy.random.Generator``,
so a seeded stream reproduces the same images in the same order. Images are
float64 (pixels, pixels, 3) arrays scaled to [0, 1].
"""

from __future__ import annotations

import numpy as np

from .student.ops import bilinear_weights

__all__ = [
    "random_image",
    "image_batch",
    "grating_image",
    "labeled_images",
    "resize_image",
]


def _rescale(img: np.ndarray) -> np.ndarray:
    lo = float(img.min())
    hi = float(img.max())
    return (img - lo) / max(hi - lo, 1e-12)


def random_image(rng: np.random.Generator, pixels: int) -> np.ndarray:
    """Multi-scale noise texture: smooth coarse structure plus fine grain.

    Coarse structure comes from a low-resolution Gaussian field upsampled
    bilinearly, so neighboring patches are correlated and patch statistics
    vary across the image. Each color channel gets its own field.
    """
    if pixels < 2:
        raise ValueError("image needs at least 2 pixels per side")
    coarse_n = max(pixels // 16, 2)
    coarse = rng.normal(size=(coarse_n, coarse_n, 3))
    w = bilinear_weights(coarse_n, pixels)
    img = np.einsum("yi,ijc,xj->yxc", w, coarse, w)
    img = img + 0.25 * rng.normal(size=(pixels, pixels, 3))
    return _rescale(img)


def image_batch(rng: np.random.Generator, count: int, pixels: int) -> list[np.ndarray]:
    return [random_image(rng, pixels) for _ in range(count)]


def resize_image(image: np.ndarray, pixels: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) image to pixels x pixels, corners aligned."""
    if pixels < 2:
        raise ValueError("target needs at least 2 pixels per side")
    if image.shape[0] == pixels and image.shape[1] == pixels:
        return image
    wr = bilinear_weights(image.shape[0], pixels)
    wc = bilinear_weights(image.shape[1], pixels)
    return np.einsum("yi,ijc,xj->yxc", wr, image, wc, optimize=True)


def grating_image(
    rng: np.random.Generator,
    pixels: int,
    orientation: float,
    frequency: float,
    noise: float = 0.2,
) -> np.ndarray:
    """Oriented sinusoidal grating with random phase and additive noise.

    ``orientation`` is radians; ``frequency`` is cycles per 16-pixel span,
    so gratings look the same density at any resolution. The grating drives
    all three channels with a random per-channel amplitude (a color tint).
    """
    if pixels < 2:
        raise ValueError("image needs at least 2 pixels per side")
    phase = rng.uniform(0.0, 2.0 * np.pi)
    tint = rng.uniform(0.5, 1.0, size=3)
    coords = np.arange(pixels, dtype=np.float64)
    yy = coords[:, None]
    xx = coords[None, :]
    axis = xx * np.cos(orientation) + yy * np.sin(orientation)
    wave = np.sin(2.0 * np.pi * frequency * axis / 16.0 + phase)
    img = wave[:, :, None] * tint
    if noise > 0.0:
        img = img + noise * rng.normal(size=(pixels, pixels, 3))
    return _rescale(img)


def labeled_images(
    rng: np.random.Generator,
    classes: int,
    per_class: int,
    pixels: int,
    noise: float = 0.2,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Class-conditional gratings: each class owns an orientation/frequency.

    Orientation spans [0, pi) evenly; frequency cycles through {1, 2, 3}.
    Classes therefore differ in local gradient statistics, which is what the
    feature extractors respond to. Returns (images, labels) with classes
    interleaved so any prefix is roughly balanced.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("need at least 1 image per class")
    images = []
    labels = []
    for i in range(per_class):
        for c in range(classes):
            orientation = np.pi * c / classes
            frequency = 1.0 + (c % 3)
            images.append(grating_image(rng, pixels, orientation, frequency, noise))
            labels.append(c)
    return images, np.asarray(labels, dtype=np.int64)
