"""Fixed comparison policy tests."""

import numpy as np
import pytest

from aerotx import baselines
from aerotx.baselines import BaselineId, select_blocks
from aerotx.errors import ConfigError


class TestFixedOrders:
    def test_row_order_first_three(self):
        mask = select_blocks(BaselineId.ROW_ORDER, 3)
        assert np.flatnonzero(mask).tolist() == [0, 1, 2]

    def test_column_order(self):
        mask = select_blocks(BaselineId.COLUMN_ORDER, 5)
        assert np.flatnonzero(mask).tolist() == sorted([0, 4, 8, 12, 1])

    def test_clockwise_spiral_center_first(self):
        mask = select_blocks(BaselineId.CLOCKWISE_SPIRAL, 4)
        assert sorted(np.flatnonzero(mask).tolist()) == [5, 6, 9, 10]

    def test_counter_clockwise_center_first(self):
        mask = select_blocks(BaselineId.COUNTER_CLOCKWISE_SPIRAL, 4)
        assert sorted(np.flatnonzero(mask).tolist()) == [5, 6, 9, 10]

    def test_spiral_orders_are_permutations(self):
        assert sorted(baselines.CLOCKWISE_SPIRAL) == list(range(16))
        assert sorted(baselines.COUNTER_CLOCKWISE_SPIRAL) == list(range(16))

    def test_locked_spiral_enumeration(self):
        assert baselines.CLOCKWISE_SPIRAL[:8] == (5, 6, 10, 9, 0, 1, 2, 3)
        assert baselines.COUNTER_CLOCKWISE_SPIRAL[:8] == (5, 9, 10, 6, 0, 4, 8, 12)

    @pytest.mark.parametrize("bid", [BaselineId.ROW_ORDER, BaselineId.COLUMN_ORDER,
                                     BaselineId.CLOCKWISE_SPIRAL,
                                     BaselineId.COUNTER_CLOCKWISE_SPIRAL])
    def test_every_count_selects_exactly_n(self, bid):
        for n in range(17):
            assert select_blocks(bid, n).sum() == n

    def test_all_blocks(self):
        for bid in BaselineId:
            rng = np.random.default_rng(0)
            lr = rng.random((8, 8, 3)).astype(np.float32)
            mask = select_blocks(bid, 16, lr_image=lr, rng=rng)
            assert mask.sum() == 16

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            select_blocks(BaselineId.ROW_ORDER, 17)


class TestRandom:
    def test_reproducible(self):
        a = select_blocks(BaselineId.RANDOM, 8, rng=np.random.default_rng(1))
        b = select_blocks(BaselineId.RANDOM, 8, rng=np.random.default_rng(1))
        assert np.array_equal(a, b)

    def test_uniform_subset_frequencies(self):
        rng = np.random.default_rng(2)
        counts = np.zeros(16)
        for _ in range(10_000):
            counts += select_blocks(BaselineId.RANDOM, 8, rng=rng)
        freq = counts / 10_000
        assert np.all(np.abs(freq - 0.5) <= 0.02)

    def test_exact_count(self):
        rng = np.random.default_rng(3)
        for n in range(17):
            assert select_blocks(BaselineId.RANDOM, n, rng=rng).sum() == n


class TestSaliency:
    def _textured_lr(self, hot_blocks, h=16, w=16):
        lr = np.full((h, w, 3), 0.5, dtype=np.float32)
        for b in hot_blocks:
            r, c = divmod(b, 4)
            bh, bw = h // 4, w // 4
            tile = np.indices((bh, bw)).sum(axis=0) % 2
            lr[r * bh:(r + 1) * bh, c * bw:(c + 1) * bw, :] = tile[:, :, None]
        return lr

    def test_picks_textured_blocks(self):
        lr = self._textured_lr([3, 7, 12])
        mask = select_blocks(BaselineId.SALIENCY, 3, lr_image=lr)
        assert sorted(np.flatnonzero(mask).tolist()) == [3, 7, 12]

    def test_order_is_permutation(self):
        lr = np.random.default_rng(4).random((16, 16, 3)).astype(np.float32)
        order = baselines.saliency_order(lr)
        assert sorted(order.tolist()) == list(range(16))

    def test_brightness_shift_invariant(self):
        rng = np.random.default_rng(5)
        lr = rng.random((16, 16, 3)).astype(np.float32) * 0.5
        shifted = np.clip(lr + 0.25, 0, 1)
        assert np.array_equal(baselines.saliency_order(lr), baselines.saliency_order(shifted))

    def test_ties_break_by_index(self):
        lr = np.full((16, 16, 3), 0.5, dtype=np.float32)  # all blocks tie at zero energy
        order = baselines.saliency_order(lr)
        assert order.tolist() == list(range(16))
