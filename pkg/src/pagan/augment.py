"""The stochastic augmenter a(x): reflect-pad, then random-crop back to size.

For 2-D point data, where padding has no meaning, the augmenter adds
isotropic Gaussian jitter instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pagan.tensor import reflect_indices


@dataclass(frozen=True)
class AugmentConfig:
    pad_fraction: float = 0.1
    rng_seed: int = 0
    jitter_std: float = 0.05

    def __post_init__(self):
        if not 0 <= self.pad_fraction < 0.5:
            raise ValueError(f"pad_fraction must lie in [0, 0.5), got {self.pad_fraction}")
        if self.jitter_std < 0:
            raise ValueError(f"jitter_std must be >= 0, got {self.jitter_std}")

    def pad_for(self, height, width):
        if self.pad_fraction == 0:
            return 0
        return max(1, int(np.floor(self.pad_fraction * min(height, width) + 0.5)))


def offset_distribution(config, image_shape):
    """Support and probabilities of the crop offsets (dy, dx).

    Returns ``(offsets, probs)`` with ``offsets`` of shape (M, 2).
    """
    h, w = image_shape[-2:]
    pad = config.pad_for(h, w)
    side = np.arange(2 * pad + 1)
    dy, dx = np.meshgrid(side, side, indexing="ij")
    offsets = np.stack([dy.ravel(), dx.ravel()], axis=1)
    probs = np.full(len(offsets), 1.0 / len(offsets))
    return offsets, probs


def crop_padded(x, pad, offsets):
    """Crop each reflect-padded image of ``x`` (N, C, H, W) at its own offset."""
    n, c, h, w = x.shape
    rows = reflect_indices(h, pad)[offsets[:, 0, None] + np.arange(h)]
    cols = reflect_indices(w, pad)[offsets[:, 1, None] + np.arange(w)]
    out = x[np.arange(n)[:, None, None], :, rows[:, :, None], cols[:, None, :]]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def draw_offsets(rng, n, pad):
    return rng.integers(0, 2 * pad + 1, size=(n, 2))


def augment(x, config, rng=None):
    """Draw y ~ r(y | x) for every item of the batch independently.

    Without ``rng`` a fresh generator seeded from ``config.rng_seed`` is used.
    """
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    x = np.asarray(x)
    if x.ndim == 2:
        if config.jitter_std == 0:
            return x.copy()
        return (x + config.jitter_std * rng.standard_normal(x.shape)).astype(x.dtype)
    if x.ndim != 4:
        raise ValueError(f"augment expects (N, C, H, W) images or (N, D) points, got {x.shape}")
    h, w = x.shape[2:]
    if min(h, w) < 2:
        raise ValueError(f"images must be at least 2x2, got {h}x{w}")
    pad = config.pad_for(h, w)
    if pad == 0:
        return x.copy()
    if pad >= min(h, w):
        raise ValueError(f"pad {pad} must be smaller than {min(h, w)}")
    return crop_padded(x, pad, draw_offsets(rng, len(x), pad))
