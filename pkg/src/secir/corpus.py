"""Deterministic synthetic image corpus.

Classes are seeded procedural textures (sums of oriented gratings plus a
smooth blob); members are small perturbations of their class base.  The
structure is strong enough for the toy extractor to group classes, and all
pixel values stay inside [0, 1] so images can be split directly.
"""

from __future__ import annotations

import numpy as np

from .numeric import DEFAULT_CONFIG, truncate
from .rng import derive_rng


def _smooth_noise(rng, hw: int, cells: int = 7) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(cells, cells))
    reps = int(np.ceil(hw / cells))
    up = np.kron(coarse, np.ones((reps, reps)))[:hw, :hw]
    # cheap blur to remove the block edges
    up = (up + np.roll(up, 1, 0) + np.roll(up, -1, 0)
          + np.roll(up, 1, 1) + np.roll(up, -1, 1)) / 5.0
    return up


def _class_base(rng, hw: int) -> np.ndarray:
    yy, xx = np.mgrid[0:hw, 0:hw] / hw
    img = np.zeros((hw, hw))
    for _ in range(3):
        freq = rng.uniform(1.5, 6.0)
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        img += rng.uniform(0.4, 1.0) * np.sin(
            2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    img += 1.5 * _smooth_noise(rng, hw)
    img = (img - img.min()) / (img.max() - img.min() + 1e-12)
    return 0.05 + 0.9 * img


def make_corpus(n_images: int, n_classes: int, hw: int = 28,
                seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Images (n, 1, hw, hw) in [0, 1] and their class labels.

    Pixels are quantized onto the fixed-point grid so the stored secret and
    the plaintext-oracle input are the same logical image.
    """
    bases = [_class_base(derive_rng(seed, f"class:{c}"), hw) for c in range(n_classes)]
    images = np.empty((n_images, 1, hw, hw))
    labels = np.empty(n_images, dtype=np.int64)
    for i in range(n_images):
        c = i % n_classes
        rng = derive_rng(seed, f"member:{i}")
        img = bases[c] + 0.06 * _smooth_noise(rng, hw)
        images[i, 0] = truncate(np.clip(img, 0.0, 1.0), DEFAULT_CONFIG)
        labels[i] = c
    return images, labels


def make_queries(count: int, n_classes: int, hw: int = 28, corpus_seed: int = 0,
                 query_seed: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Fresh perturbed members of the corpus classes, for querying."""
    bases = [_class_base(derive_rng(corpus_seed, f"class:{c}"), hw)
             for c in range(n_classes)]
    images = np.empty((count, 1, hw, hw))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        c = i % n_classes
        rng = derive_rng(query_seed, f"query:{i}")
        img = bases[c] + 0.06 * _smooth_noise(rng, hw)
        images[i, 0] = truncate(np.clip(img, 0.0, 1.0), DEFAULT_CONFIG)
        labels[i] = c
    return images, labels
