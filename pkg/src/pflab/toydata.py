"""Procedural toy images: smooth gradients, a few soft-edged shapes, and a
light speckle field on part of the set.

Samples are flat vectors in [-1, 1] with channel-major (C, H, W) layout.
Edge softness, shape count, gradient strength, and speckle amplitude all
vary per image so the dataset spans a range of compression complexities;
the speckle also gives likelihood attacks some removable texture, the role
sensor noise plays in photographic data.
"""

from __future__ import annotations

import numpy as np


def _soft_disk(xx, yy, cx, cy, radius, softness):
    r = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    return np.tanh((radius - r) / softness)


def _soft_bar(xx, yy, cx, cy, half_w, angle, softness):
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    return np.tanh((half_w - np.abs(u)) / softness)


def toy_image_dataset(n, height, width, seed, channels=1):
    """Seeded dataset of ``n`` flat samples with shape (channels, height, width)."""
    if n < 1:
        raise ValueError("need at least one sample")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    rng = np.random.Generator(np.random.Philox(seed))
    ys, xs = np.mgrid[0:height, 0:width]
    yy = (ys + 0.5) / height
    xx = (xs + 0.5) / width
    out = np.zeros((n, channels * height * width))
    for i in range(n):
        base = rng.uniform(-0.4, 0.4)
        gx, gy = rng.uniform(-0.8, 0.8, size=2)
        field = base + gx * (xx - 0.5) + gy * (yy - 0.5)
        for _ in range(rng.integers(1, 4)):
            cx, cy = rng.uniform(0.15, 0.85, size=2)
            softness = rng.uniform(0.02, 0.25)
            amp = rng.uniform(-0.9, 0.9)
            if rng.random() < 0.7:
                radius = rng.uniform(0.1, 0.35)
                field = field + amp * _soft_disk(xx, yy, cx, cy, radius, softness)
            else:
                half_w = rng.uniform(0.05, 0.2)
                angle = rng.uniform(0.0, np.pi)
                field = field + amp * _soft_bar(xx, yy, cx, cy, half_w, angle, softness)
        amp = rng.uniform(0.07, 0.2)
        field = field + amp * rng.uniform(-1.0, 1.0, size=field.shape)
        if channels == 1:
            img = field[None]
        else:
            tint = rng.uniform(-0.25, 0.25, size=3)
            gains = rng.uniform(0.8, 1.0, size=3)
            img = np.stack([g * field + t for g, t in zip(gains, tint)])
        out[i] = np.clip(img, -1.0, 1.0).ravel()
    return out
