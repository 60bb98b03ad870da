"""Synthetic byte-motif datasets for desk-scale training and search runs."""
from __future__ import annotations

import numpy as np

from .sessions import SESSION_LEN, Dataset


def motif_dataset(
    n_per_class: int = 500,
    num_classes: int = 4,
    motif_len: int = 12,
    background: int = 64,
    noise: int = 8,
    seed: int = 0,
    length: int = SESSION_LEN,
) -> Dataset:
    """Each class owns one random byte motif placed at a random offset in a noisy background.

    Background bytes are uniform in ``[0, background)``; every motif byte gets
    independent uniform jitter in ``[-noise, noise]`` before clipping to a byte.
    """
    rng = np.random.default_rng(seed)
    motifs = rng.integers(0, 256, size=(num_classes, motif_len))
    n = n_per_class * num_classes
    labels = np.repeat(np.arange(num_classes), n_per_class)
    labels = labels[rng.permutation(n)]
    data = rng.integers(0, background, size=(n, length))
    offsets = rng.integers(0, length - motif_len + 1, size=n)
    jitter = rng.integers(-noise, noise + 1, size=(n, motif_len))
    for i in range(n):
        data[i, offsets[i]:offsets[i] + motif_len] = motifs[labels[i]] + jitter[i]
    data = np.clip(data, 0, 255).astype(np.uint8)
    return Dataset(data, labels, num_classes, [f"motif{c}" for c in range(num_classes)])
