"""Noisy embedding fine-tuning: bounded uniform noise on token embeddings."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, add


@dataclass
class NoiseConfig:
    alpha: float = 0.3
    seed: int = 0
    _calls: itertools.count = field(default_factory=itertools.count, repr=False, compare=False)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"neftune alpha must be >= 0, got {self.alpha}")

    def next_rng(self) -> np.random.Generator:
        """A fresh generator for the next call, keyed on (seed, call counter)."""
        return np.random.default_rng(np.random.SeedSequence([self.seed, next(self._calls)]))


def noise_bound(alpha: float, length: int, dim: int) -> float:
    """Largest magnitude any single noise entry can take."""
    return alpha / math.sqrt(length * dim)


def sample_noise(shape: tuple[int, int], alpha: float, rng: np.random.Generator) -> np.ndarray:
    length, dim = shape
    return rng.uniform(-1.0, 1.0, size=shape) * noise_bound(alpha, length, dim)


def inject_noise(
    embeddings: Tensor,
    config: NoiseConfig,
    mode: str,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Add Uniform(-1, 1) * alpha / sqrt(L * d) noise in train mode only.

    Without an explicit ``rng`` the config's counter stream supplies one, so
    repeated calls draw different noise.
    """
    if mode != "train" or config.alpha == 0:
        return embeddings
    if embeddings.ndim != 2 or embeddings.shape[0] < 1 or embeddings.shape[1] < 1:
        raise ValueError(f"embeddings must be (L, d) with L, d >= 1, got {embeddings.shape}")
    rng = config.next_rng() if rng is None else rng
    eps = sample_noise(embeddings.shape, config.alpha, rng)
    return add(embeddings, Tensor(eps))
