"""Top-K magnitude partitioning of tensors into active/non-active sets.

The mask over a tensor keeps the largest-magnitude entries; everything else is
zeroed wherever the mask is applied. Selection is deterministic: ties are
broken in favour of the lower flat index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TopKMask:
    """Active-entry set for one tensor.

    `active_indices` are strictly increasing flat indices into the row-major
    tensor. Cardinality is max(1, floor(keep_fraction * numel)) for
    keep_fraction > 0, and 0 for keep_fraction == 0.
    """

    tensor_shape: tuple[int, ...]
    active_indices: np.ndarray  # int64, sorted ascending
    keep_fraction: float

    @property
    def numel(self) -> int:
        return int(np.prod(self.tensor_shape))

    def as_bool(self) -> np.ndarray:
        """Dense 0/1 view of the mask, in the tensor's shape."""
        flat = np.zeros(self.numel, dtype=bool)
        flat[self.active_indices] = True
        return flat.reshape(self.tensor_shape)


@dataclass(frozen=True)
class SparsityConfig:
    """Sparsity level `sp` (fraction of entries zeroed by top-K) plus the
    per-layer sparsifiable flags of a model.

    `per_sample_activations` switches the activation top-K from one mask over
    the whole batch tensor (default) to one mask per sample.
    """

    sp: float
    sparsifiable: dict[str, bool] = field(default_factory=dict)
    per_sample_activations: bool = False

    def __post_init__(self):
        if not 0.0 <= self.sp <= 1.0:
            raise ValueError(f"sp must be in [0,1], got {self.sp}")

    @property
    def keep_fraction(self) -> float:
        return 1.0 - self.sp


def mask_cardinality(keep_fraction: float, numel: int) -> int:
    """Number of entries a top-K mask keeps: floor(keep_fraction * numel),
    with a minimum of 1 whenever keep_fraction > 0."""
    if keep_fraction == 0.0:
        return 0
    return max(1, int(math.floor(keep_fraction * numel)))


def topk_mask(t: np.ndarray, keep_fraction: float) -> TopKMask:
    """Select the top `keep_fraction` entries of `t` by magnitude.

    Every selected magnitude is >= every unselected magnitude; ties are broken
    by lower flat index.
    """
    if t.size == 0:
        raise ValueError("cannot build a top-K mask over an empty tensor")
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in [0,1], got {keep_fraction}")
    count = mask_cardinality(keep_fraction, t.size)
    if count == 0:
        idx = np.empty(0, dtype=np.int64)
    else:
        # Stable sort on descending magnitude keeps original (lower-index)
        # order among equal magnitudes.
        order = np.argsort(-np.abs(t.ravel()), kind="stable")
        idx = np.sort(order[:count].astype(np.int64))
    return TopKMask(tensor_shape=tuple(t.shape), active_indices=idx, keep_fraction=keep_fraction)


def apply_mask(t: np.ndarray, m: TopKMask) -> np.ndarray:
    """Zero every entry of `t` outside the mask; `t` itself is not modified."""
    if tuple(t.shape) != m.tensor_shape:
        raise ValueError(f"tensor shape {tuple(t.shape)} does not match mask shape {m.tensor_shape}")
    out = np.zeros_like(t)
    flat = out.reshape(-1)
    flat[m.active_indices] = t.reshape(-1)[m.active_indices]
    return out


def keep_fraction_for(sp: float, r_mask: float) -> float:
    """Uplink keep fraction for sparsity level `sp` and mask ratio `r_mask`:
    min(1, 1 - sp + r_mask)."""
    if not 0.0 <= sp <= 1.0:
        raise ValueError(f"sp must be in [0,1], got {sp}")
    if not 0.0 <= r_mask <= 1.0:
        raise ValueError(f"r_mask must be in [0,1], got {r_mask}")
    return min(1.0, 1.0 - sp + r_mask)
