"""Index-preserving augmentations for student inputs.

Only coordinates change; superpoints, regions and labels are carried over so
teacher and student views line up one-to-one.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    jitter_sigma: float = 0.01
    elastic_granularity: float = 0.2
    elastic_magnitude: float = 0.04
    flip: bool = True
    jitter: bool = True
    elastic: bool = True

    @classmethod
    def disabled(cls):
        return cls(flip=False, jitter=False, elastic=False)


def flip_xy(positions, rng, p=0.5):
    """Negate x and/or y, each independently with probability ``p``."""
    out = positions.copy()
    for axis in (0, 1):
        if rng.random() < p:
            out[:, axis] = -out[:, axis]
    return out


def jitter(positions, rng, sigma=0.01):
    return positions + rng.normal(0.0, sigma, size=positions.shape)


def elastic_distortion(positions, rng, granularity=0.2, magnitude=0.04):
    """Smooth random displacement field sampled on a coarse grid.

    The field is Gaussian noise blurred over neighbouring cells, scaled to
    RMS ``magnitude`` and trilinearly interpolated at every point.
    """
    lo = positions.min(0) - 2 * granularity
    shape = tuple(np.ceil((positions.max(0) + 2 * granularity - lo) / granularity).astype(int) + 1)
    noise = rng.normal(size=shape + (3,))
    field = np.stack([gaussian_filter(noise[..., i], sigma=1.0, mode="nearest") for i in range(3)], axis=-1)
    rms = np.sqrt(np.mean(field ** 2))
    if rms > 0:
        field *= magnitude / rms
    return positions + kernels.trilinear(field, lo, granularity, positions)


def augment(sample, rng, cfg: AugmentConfig = AugmentConfig()):
    """Augmented copy of ``sample`` with identical point order and labels."""
    pos = np.asarray(sample.positions, dtype=np.float64)
    if cfg.flip:
        pos = flip_xy(pos, rng, cfg.flip_p)
    if cfg.jitter and cfg.jitter_sigma > 0:
        pos = jitter(pos, rng, cfg.jitter_sigma)
    if cfg.elastic and cfg.elastic_magnitude > 0:
        pos = elastic_distortion(pos, rng, cfg.elastic_granularity, cfg.elastic_magnitude)
    return replace(sample, positions=pos.astype(np.float32))
