"""Imaging tests: partition/reassemble, LR previews, synthetic data, ingestion."""

import numpy as np
import pytest

from aerotx import imaging
from aerotx.errors import ConfigError, IngestionError, PartitionError


def random_image(rng, h=32, w=32):
    return rng.random((h, w, 3)).astype(np.float32)


class TestPartition:
    def test_paper_scale_block_size(self):
        img = np.zeros((224, 224, 3), dtype=np.float32)
        blocks = imaging.partition_blocks(img)
        assert blocks.shape == (16, 56, 56, 3)

    def test_round_trip_bitwise(self):
        rng = np.random.default_rng(0)
        img = random_image(rng)
        back = imaging.reassemble_blocks(imaging.partition_blocks(img))
        assert back.tobytes() == img.tobytes()

    def test_block_indexing_matches_oracle(self):
        # block (r, c) covers pixel rows [r*H/4, (r+1)*H/4)
        rng = np.random.default_rng(1)
        img = random_image(rng, 16, 16)
        blocks = imaging.partition_blocks(img)
        for b in range(16):
            r, c = divmod(b, 4)
            expected = img[r * 4:(r + 1) * 4, c * 4:(c + 1) * 4, :]
            assert np.array_equal(blocks[b], expected)

    def test_indivisible_raises(self):
        with pytest.raises(PartitionError):
            imaging.partition_blocks(np.zeros((15, 16, 3), dtype=np.float32))


class TestMakeLr:
    def test_constant_image(self):
        img = np.full((16, 16, 3), 0.37, dtype=np.float32)
        lr = imaging.make_lr(img)
        assert lr.shape == (4, 4, 3)
        assert np.allclose(lr, 0.37, atol=1e-7)

    def test_paper_scale_resolution(self):
        lr = imaging.make_lr(np.zeros((224, 224, 3), dtype=np.float32))
        assert lr.shape == (56, 56, 3)

    def test_checkerboard_averages_to_half(self):
        idx = np.add.outer(np.arange(16), np.arange(16)) % 2
        img = np.repeat(idx[:, :, None], 3, axis=2).astype(np.float32)
        lr = imaging.make_lr(img)
        assert np.array_equal(lr, np.full((4, 4, 3), 0.5, dtype=np.float32))

    def test_commutes_with_partition(self):
        # LR of block (r, c) equals block (r, c) of LR
        rng = np.random.default_rng(2)
        img = random_image(rng, 32, 32)
        lr_blocks = imaging.partition_blocks(imaging.make_lr(img))
        blocks_lr = np.stack([imaging.make_lr(b) for b in imaging.partition_blocks(img)])
        assert np.allclose(lr_blocks, blocks_lr, atol=1e-7)


class TestSynthetic:
    def test_same_seed_identical(self):
        a = imaging.generate_synthetic(9, 5, 3, 32, 32)
        b = imaging.generate_synthetic(9, 5, 3, 32, 32)
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_different_seed_differs(self):
        a = imaging.generate_synthetic(9, 5, 3, 32, 32)
        b = imaging.generate_synthetic(10, 5, 3, 32, 32)
        assert a.images.tobytes() != b.images.tobytes()

    def test_evidence_blocks_exist_and_recorded(self):
        ds = imaging.generate_synthetic(4, 3, 4, 32, 32)
        assert ds.meta is not None
        assert len(ds.meta.evidence_blocks) == 4
        for blocks in ds.meta.evidence_blocks:
            assert 2 <= len(blocks) <= 4
            assert all(0 <= b < 16 for b in blocks)

    def test_zero_noise_differs_only_in_evidence(self):
        ds = imaging.generate_synthetic(11, 1, 2, 32, 32, noise_amplitude=0.0)
        img0, img1 = ds.images[0], ds.images[1]
        touched = set(ds.meta.evidence_blocks[0]) | set(ds.meta.evidence_blocks[1])
        for b in range(16):
            rs, cs = imaging.block_slice(b, 32, 32)
            if b not in touched:
                assert np.array_equal(img0[rs, cs], img1[rs, cs])
                assert np.allclose(img0[rs, cs], 0.5, atol=1e-6)

    def test_values_in_range(self):
        ds = imaging.generate_synthetic(3, 4, 4, 32, 32)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_oracle_classifier_on_evidence_blocks(self):
        # matched quadrature filters on the recorded evidence blocks reach >=95%
        ds = imaging.generate_synthetic(21, 50, 4, 96, 96)
        meta = ds.meta
        h, w = 96, 96
        bh, bw = h // 4, w // 4
        vv, uu = np.meshgrid(np.arange(bh) / bh, np.arange(bw) / bw, indexing="ij")
        templates = []
        for k in range(4):
            coord = uu * np.cos(meta.orientations[k]) + vv * np.sin(meta.orientations[k])
            s = np.sin(2 * np.pi * meta.frequencies[k] * coord)
            c = np.cos(2 * np.pi * meta.frequencies[k] * coord)
            templates.append((s - s.mean(), c - c.mean()))
        correct = 0
        for img, label in zip(ds.images, ds.labels):
            gray = img.mean(axis=2)
            scores = []
            for k in range(4):
                s, c = templates[k]
                e = 0.0
                for b in meta.evidence_blocks[k]:
                    rs, cs = imaging.block_slice(b, h, w)
                    block = gray[rs, cs] - gray[rs, cs].mean()
                    e += np.hypot((block * s).sum(), (block * c).sum())
                scores.append(e / len(meta.evidence_blocks[k]))
            correct += int(np.argmax(scores) == label)
        assert correct / len(ds) >= 0.95

    def test_class_count_limit(self):
        with pytest.raises(ConfigError):
            imaging.generate_synthetic(0, 1, 17, 32, 32)


class TestSplit:
    def test_deterministic_membership(self):
        ds = imaging.generate_synthetic(5, 10, 2, 16, 16)
        tr1, te1 = imaging.split_dataset(ds, 0.8, seed=42)
        tr2, te2 = imaging.split_dataset(ds, 0.8, seed=42)
        assert np.array_equal(tr1.labels, tr2.labels)
        assert tr1.images.tobytes() == tr2.images.tobytes()
        assert len(tr1) == 16 and len(te1) == 4

    def test_disjoint_and_complete(self):
        ds = imaging.generate_synthetic(5, 10, 2, 16, 16)
        ds.images[:, 0, 0, 0] = np.arange(len(ds), dtype=np.float32) / 100.0  # tag
        tr, te = imaging.split_dataset(ds, 0.8, seed=1)
        tags = np.concatenate([tr.images[:, 0, 0, 0], te.images[:, 0, 0, 0]])
        expected = (np.arange(len(ds)) / 100.0).astype(np.float32)
        assert np.array_equal(np.sort(tags), expected)


class TestLoadDataset:
    @staticmethod
    def _write_png(path, value):
        from PIL import Image as PILImage
        arr = np.full((8, 8, 3), value, dtype=np.uint8)
        PILImage.fromarray(arr).save(path)

    def test_directory_per_class(self, tmp_path):
        for cname, val in [("alpha", 10), ("beta", 200)]:
            d = tmp_path / cname
            d.mkdir()
            for i in range(3):
                self._write_png(d / f"{i}.png", val)
        ds = imaging.load_dataset(tmp_path, 16, 16)
        assert len(ds) == 6
        assert ds.class_count == 2
        assert sorted(ds.labels.tolist()) == [0, 0, 0, 1, 1, 1]

    def test_manifest(self, tmp_path):
        d = tmp_path / "imgs"
        d.mkdir()
        self._write_png(d / "a.png", 50)
        self._write_png(d / "b.png", 90)
        (tmp_path / "manifest.tsv").write_text("imgs/a.png\t0\nimgs/b.png\t1\n")
        ds = imaging.load_dataset(tmp_path, 8, 8, manifest=tmp_path / "manifest.tsv")
        assert len(ds) == 2 and ds.class_count == 2

    def test_bad_path_named_in_error(self, tmp_path):
        (tmp_path / "manifest.tsv").write_text("missing/file.png\t0\n")
        with pytest.raises(IngestionError) as exc:
            imaging.load_dataset(tmp_path, 8, 8, manifest=tmp_path / "manifest.tsv")
        assert "missing/file.png" in str(exc.value)

    def test_empty_class_dir(self, tmp_path):
        (tmp_path / "empty_class").mkdir()
        with pytest.raises(ConfigError):
            imaging.load_dataset(tmp_path, 8, 8)

    def test_save_load_round_trip(self, tmp_path):
        ds = imaging.generate_synthetic(6, 2, 2, 16, 16)
        imaging.save_dataset(ds, tmp_path / "ds")
        back = imaging.load_saved_dataset(tmp_path / "ds")
        assert back.images.tobytes() == ds.images.tobytes()
        assert np.array_equal(back.labels, ds.labels)
        assert back.meta.evidence_blocks == ds.meta.evidence_blocks
