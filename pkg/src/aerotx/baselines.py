"""The six fixed comparison block-selection policies.

Every policy returns exactly n selected blocks so comparisons against the
learned policy transmit the same volume. Spiral cell orders and the
saliency measure are documented conventions locked by tests.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import ConfigError
from .imaging import N_BLOCKS, partition_blocks


class BaselineId(Enum):
    ROW_ORDER = "row_order"
    COLUMN_ORDER = "column_order"
    CLOCKWISE_SPIRAL = "clockwise_spiral"
    COUNTER_CLOCKWISE_SPIRAL = "counter_clockwise_spiral"
    RANDOM = "random"
    SALIENCY = "saliency"


ROW_ORDER = tuple(range(16))
COLUMN_ORDER = tuple(r * 4 + c for c in range(4) for r in range(4))
# inner ring clockwise from (1,1), then the outer ring clockwise from (0,0)
CLOCKWISE_SPIRAL = (5, 6, 10, 9, 0, 1, 2, 3, 7, 11, 15, 14, 13, 12, 8, 4)
# same rings, opposite orientation: inner from (1,1) downwards, outer down
# the left column first
COUNTER_CLOCKWISE_SPIRAL = (5, 9, 10, 6, 0, 4, 8, 12, 13, 14, 15, 11, 7, 3, 2, 1)

_FIXED_ORDERS = {
    BaselineId.ROW_ORDER: ROW_ORDER,
    BaselineId.COLUMN_ORDER: COLUMN_ORDER,
    BaselineId.CLOCKWISE_SPIRAL: CLOCKWISE_SPIRAL,
    BaselineId.COUNTER_CLOCKWISE_SPIRAL: COUNTER_CLOCKWISE_SPIRAL,
}


def saliency_order(lr_image: np.ndarray) -> np.ndarray:
    """Blocks ranked by mean first-difference gradient magnitude, descending.

    Ties break toward the lower block index; constant brightness shifts do
    not change the ranking.
    """
    energies = np.empty(N_BLOCKS)
    for b, block in enumerate(partition_blocks(lr_image)):
        gray = block.mean(axis=2, dtype=np.float64)
        gx = np.abs(np.diff(gray, axis=1)).mean() if gray.shape[1] > 1 else 0.0
        gy = np.abs(np.diff(gray, axis=0)).mean() if gray.shape[0] > 1 else 0.0
        energies[b] = gx + gy
    return np.lexsort((np.arange(N_BLOCKS), -energies))


def select_blocks(baseline: BaselineId, n: int, lr_image: np.ndarray | None = None,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Mask with exactly n blocks chosen by the given fixed policy."""
    if not 0 <= n <= N_BLOCKS:
        raise ConfigError(f"block count must be in 0..{N_BLOCKS}, got {n}")
    mask = np.zeros(N_BLOCKS, dtype=np.uint8)
    if baseline in _FIXED_ORDERS:
        chosen = _FIXED_ORDERS[baseline][:n]
    elif baseline is BaselineId.RANDOM:
        if rng is None:
            raise ConfigError("the random baseline needs a generator")
        chosen = rng.choice(N_BLOCKS, size=n, replace=False)
    elif baseline is BaselineId.SALIENCY:
        if lr_image is None:
            raise ConfigError("the saliency baseline needs the LR image")
        chosen = saliency_order(lr_image)[:n]
    else:  # pragma: no cover
        raise ConfigError(f"unknown baseline {baseline}")
    mask[np.asarray(chosen, dtype=np.int64)] = 1
    return mask
