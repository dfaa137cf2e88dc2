"""Masked views of feature maps and subject-pair sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import Dataset, FeatureMap

MASK_VALUE = 0.0


@dataclass(frozen=True)
class MaskedView:
    subject_id: str
    view_index: int
    mask: tuple[int, ...]
    values: np.ndarray


def sample_pair(d: Dataset, rng: np.random.Generator) -> tuple[FeatureMap, FeatureMap]:
    if len(d) < 2:
        raise ValueError(f"need at least 2 subjects to sample a pair, got {len(d)}")
    i, j = rng.choice(len(d), size=2, replace=False)
    return d.maps[i], d.maps[j]


def random_masks(n_roi: int, k: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` independent uniform k-subsets of ``range(n_roi)``, as a boolean array."""
    if not 1 <= k <= n_roi - 1:
        raise ValueError(f"k must be in [1, {n_roi - 1}], got {k}")
    if count < 1:
        raise ValueError(f"number of views must be >= 1, got {count}")
    # ranking iid uniforms gives a uniformly random permutation per row
    order = np.argsort(rng.random((count, n_roi)), axis=1)
    mask = np.zeros((count, n_roi), dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=1)
    return mask


def apply_masks(values: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Broadcast ``values`` (n_roi, F) against ``masks`` (K, n_roi) -> (K, n_roi, F)."""
    return np.where(masks[:, :, None], MASK_VALUE, values[None, :, :])


def make_views(x: FeatureMap, k: int, K: int, rng: np.random.Generator) -> list[MaskedView]:
    masks = random_masks(x.values.shape[0], k, K, rng)
    stacked = apply_masks(x.values, masks)
    return [
        MaskedView(x.subject_id, j + 1, tuple(np.flatnonzero(m).tolist()), v)
        for j, (m, v) in enumerate(zip(masks, stacked))
    ]


def draw_k(k_max: int, n_roi: int, rng: np.random.Generator) -> int:
    """Number of ROIs to mask for one iteration, uniform on ``[1, k_max]``."""
    if not 1 <= k_max <= n_roi - 1:
        raise ValueError(f"k_max must be in [1, {n_roi - 1}] for {n_roi} ROIs, got {k_max}")
    return int(rng.integers(1, k_max + 1))
