"""Deterministic synthetic stripe dataset used by the overfit run."""

from __future__ import annotations

import numpy as np

STRIPE_PERIOD = 4
NOISE_STD = 0.3


def stripe_image(vertical: bool, size: int = 32, phase: int = 0) -> np.ndarray:
    """Clean (3, size, size) stripe pattern in [-1, 1]; stripes are 2 pixels wide."""
    idx = (np.arange(size) + phase) % STRIPE_PERIOD < STRIPE_PERIOD // 2
    line = np.where(idx, 1.0, -1.0)
    plane = np.broadcast_to(line[None, :] if vertical else line[:, None], (size, size))
    return np.repeat(plane[None], 3, axis=0).copy()


def stripes(n: int = 32, size: int = 32, seed: int = 42) -> tuple[np.ndarray, np.ndarray]:
    """Balanced two-class set: label 0 = horizontal stripes, 1 = vertical stripes.

    Each image gets a random stripe phase and additive Gaussian noise, all drawn
    from one PCG64 generator seeded with ``seed``.

    Returns:
        images (n, 3, size, size) float64 and labels (n,) int64.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = np.arange(n, dtype=np.int64) % 2
    images = np.empty((n, 3, size, size))
    for i, lab in enumerate(labels):
        phase = int(rng.integers(STRIPE_PERIOD))
        images[i] = stripe_image(bool(lab), size, phase) + NOISE_STD * rng.standard_normal((3, size, size))
    return images, labels
