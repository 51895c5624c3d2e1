"""Synthetic token/point feature pairs with a planted token -> point alignment.

Each sample draws T distinct concepts from a fixed vocabulary. Token i carries
concept c_i; the points planted for token i (a fixed positional block) carry
the same concept direction; remaining points are random background
directions. Gaussian noise of norm ~sigma is added to every row.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class SyntheticPairSpec:
    t_tokens: int = 8
    n_points: int = 64
    dim: int = 32
    concept_count: int = 16
    noise_sigma: float = 0.1
    planted_per_token: Optional[int] = None
    vocab_seed: int = 0

    def __post_init__(self):
        if self.concept_count < 2:
            raise ValueError("concept_count must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.t_tokens < 1 or self.n_points < self.t_tokens or self.dim < 1:
            raise ValueError("need t_tokens >= 1, n_points >= t_tokens, dim >= 1")
        if self.planted_width < 1:
            raise ValueError("planted_per_token must be >= 1")

    @property
    def group(self) -> int:
        return self.n_points // self.t_tokens

    @property
    def planted_width(self) -> int:
        if self.planted_per_token is not None:
            return min(self.planted_per_token, self.group)
        return max(1, self.group // 2)

    @cached_property
    def planted_mask(self) -> np.ndarray:
        """(T, N) bool: token i -> points [i*group, i*group + width)."""
        m = np.zeros((self.t_tokens, self.n_points), dtype=bool)
        for i in range(self.t_tokens):
            m[i, i * self.group: i * self.group + self.planted_width] = True
        m.setflags(write=False)
        return m

    @cached_property
    def vocabulary(self) -> np.ndarray:
        rng = np.random.default_rng(self.vocab_seed)
        v = rng.normal(size=(self.concept_count, self.dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v.setflags(write=False)
        return v


@dataclass
class SyntheticBatch:
    f_text: np.ndarray      # (B, T, d)
    f_3d: np.ndarray        # (B, N, d)
    mask: np.ndarray        # (T, N) planted correspondences
    concepts: np.ndarray    # (B, T) concept ids

    def __len__(self):
        return self.f_text.shape[0]

    def subset(self, n: int) -> "SyntheticBatch":
        return SyntheticBatch(self.f_text[:n], self.f_3d[:n], self.mask, self.concepts[:n])


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_synthetic_batch(spec: SyntheticPairSpec, batch: int, seed=None) -> SyntheticBatch:
    """`seed` may be an int or a numpy Generator (consumed in place)."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t, n, d = spec.t_tokens, spec.n_points, spec.dim
    vocab = spec.vocabulary
    replace = spec.concept_count < t
    concepts = np.stack([rng.choice(spec.concept_count, size=t, replace=replace) for _ in range(batch)])
    f_text = vocab[concepts].copy()
    f_3d = _unit_rows(rng.normal(size=(batch, n, d)))
    planted = spec.planted_mask
    for i in range(t):
        cols = np.flatnonzero(planted[i])
        f_3d[:, cols, :] = vocab[concepts[:, i]][:, None, :]
    if spec.noise_sigma > 0:
        s = spec.noise_sigma / np.sqrt(d)
        f_text = f_text + rng.normal(0.0, s, size=f_text.shape)
        f_3d = f_3d + rng.normal(0.0, s, size=f_3d.shape)
    return SyntheticBatch(f_text, f_3d, planted, concepts)


def planted_mass(attention: np.ndarray, mask: np.ndarray) -> float:
    """Mean fraction of each attention row that falls on planted positions."""
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    return float(np.mean(np.sum(a * mask[None], axis=2)))
