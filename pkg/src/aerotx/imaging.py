"""Image data model: 4x4 semantic-block partition, LR previews, datasets.

Images are float32 (H, W, 3) arrays with values in [0, 1]. H and W must be
divisible by 4 (the semantic grid); the CS codec additionally requires the
semantic block edge H/4 to be divisible by its sub-block size k.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, PartitionError

SEMANTIC_GRID = 4
N_BLOCKS = SEMANTIC_GRID * SEMANTIC_GRID
LR_FACTOR = 4


def validate_image(img: np.ndarray):
    if img.ndim != 3 or img.shape[2] != 3:
        raise PartitionError(f"expected an (H, W, 3) image, got shape {img.shape}")
    h, w, _ = img.shape
    if h % SEMANTIC_GRID or w % SEMANTIC_GRID:
        raise PartitionError(f"image extents {(h, w)} not divisible by the {SEMANTIC_GRID}x{SEMANTIC_GRID} semantic grid")


def partition_blocks(img: np.ndarray) -> np.ndarray:
    """Split an image into its 16 semantic blocks, row-major.

    Returns an array of shape (16, H/4, W/4, 3).
    """
    validate_image(img)
    h, w, c = img.shape
    bh, bw = h // SEMANTIC_GRID, w // SEMANTIC_GRID
    blocks = (img.reshape(SEMANTIC_GRID, bh, SEMANTIC_GRID, bw, c)
              .transpose(0, 2, 1, 3, 4)
              .reshape(N_BLOCKS, bh, bw, c))
    return np.ascontiguousarray(blocks)


def reassemble_blocks(blocks: np.ndarray) -> np.ndarray:
    """Exact inverse of partition_blocks."""
    nb, bh, bw, c = blocks.shape
    if nb != N_BLOCKS:
        raise PartitionError(f"expected {N_BLOCKS} blocks, got {nb}")
    img = (blocks.reshape(SEMANTIC_GRID, SEMANTIC_GRID, bh, bw, c)
           .transpose(0, 2, 1, 3, 4)
           .reshape(SEMANTIC_GRID * bh, SEMANTIC_GRID * bw, c))
    return np.ascontiguousarray(img)


def block_slice(block_index: int, h: int, w: int):
    """Pixel slices covered by semantic block (row-major index)."""
    r, c = divmod(block_index, SEMANTIC_GRID)
    bh, bw = h // SEMANTIC_GRID, w // SEMANTIC_GRID
    return slice(r * bh, (r + 1) * bh), slice(c * bw, (c + 1) * bw)


def make_lr(img: np.ndarray) -> np.ndarray:
    """4x area-average downsampling: one LR pixel per 4x4 HR pixels."""
    validate_image(img)
    h, w, c = img.shape
    f = LR_FACTOR
    lr = (img.reshape(h // f, f, w // f, f, c)
          .mean(axis=(1, 3), dtype=np.float64)
          .astype(np.float32))
    return lr


@dataclass
class SyntheticMeta:
    """Per-class generation record: which blocks carry the class evidence."""
    seed: int
    class_count: int
    evidence_blocks: list[list[int]]
    frequencies: list[float]
    orientations: list[float]
    noise_amplitude: float
    motif_amplitude: float

    def to_dict(self):
        return {
            "seed": self.seed,
            "class_count": self.class_count,
            "evidence_blocks": self.evidence_blocks,
            "frequencies": self.frequencies,
            "orientations": self.orientations,
            "noise_amplitude": self.noise_amplitude,
            "motif_amplitude": self.motif_amplitude,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LabeledDataset:
    images: np.ndarray          # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray          # (N,) int64 in [0, class_count)
    class_count: int
    split: str = "all"
    meta: SyntheticMeta | None = None

    def __len__(self):
        return len(self.images)

    @property
    def height(self):
        return self.images.shape[1]

    @property
    def width(self):
        return self.images.shape[2]

    def subset(self, indices, split: str) -> "LabeledDataset":
        return LabeledDataset(self.images[indices], self.labels[indices],
                              self.class_count, split, self.meta)


def split_dataset(ds: LabeledDataset, train_fraction: float = 0.8,
                  seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic shuffled split; membership depends only on (seed, size)."""
    n = len(ds)
    order = np.random.default_rng([seed, 0x5B17]).permutation(n)
    n_train = int(round(train_fraction * n))
    return ds.subset(order[:n_train], "train"), ds.subset(order[n_train:], "test")


def generate_synthetic(seed: int, n_per_class: int, class_count: int,
                       height: int, width: int,
                       noise_amplitude: float = 0.2,
                       motif_amplitude: float = 0.4) -> LabeledDataset:
    """Synthetic scenes with block-localized class evidence.

    Each class owns 2-4 semantic blocks; those blocks carry an oriented
    sinusoidal grating with class-specific frequency and orientation
    (random phase per image) over a uniform-noise background. Generation is
    a pure function of the arguments.
    """
    if class_count < 1 or class_count > N_BLOCKS:
        raise ConfigError(f"class_count must be in [1, {N_BLOCKS}], got {class_count}")
    if height % SEMANTIC_GRID or width % SEMANTIC_GRID:
        raise ConfigError(f"image extents {(height, width)} not divisible by {SEMANTIC_GRID}")
    rng = np.random.default_rng([seed, 0x1A6E])
    evidence = []
    freqs = []
    orients = []
    for k in range(class_count):
        count = int(rng.integers(2, 5))
        blocks = sorted(int(b) for b in rng.choice(N_BLOCKS, size=count, replace=False))
        evidence.append(blocks)
        freqs.append(1.5 + 0.5 * (k % 4))
        orients.append(np.pi * k / class_count)

    bh, bw = height // SEMANTIC_GRID, width // SEMANTIC_GRID
    vv, uu = np.meshgrid(np.arange(bh) / bh, np.arange(bw) / bw, indexing="ij")
    n_total = class_count * n_per_class
    images = np.empty((n_total, height, width, 3), dtype=np.float32)
    labels = np.empty(n_total, dtype=np.int64)
    i = 0
    for k in range(class_count):
        coord = uu * np.cos(orients[k]) + vv * np.sin(orients[k])
        for _ in range(n_per_class):
            img = 0.5 + rng.uniform(-noise_amplitude, noise_amplitude, size=(height, width, 3))
            for b in evidence[k]:
                phase = rng.uniform(0.0, 2.0 * np.pi)
                grating = motif_amplitude * np.sin(2.0 * np.pi * freqs[k] * coord + phase)
                rs, cs = block_slice(b, height, width)
                img[rs, cs, :] += grating[:, :, None]
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = k
            i += 1
    meta = SyntheticMeta(seed, class_count, evidence, freqs, orients,
                         noise_amplitude, motif_amplitude)
    return LabeledDataset(images, labels, class_count, "all", meta)


def load_dataset(root, height: int, width: int, manifest=None) -> LabeledDataset:
    """Load a directory-per-class image tree, or a manifest of path/label pairs.

    Manifest lines are "relative/path<TAB>label". Images are resized to
    (height, width) and scaled to [0, 1].
    """
    try:
        from PIL import Image as PILImage
    except ImportError as exc:  # pragma: no cover
        raise IngestionError(f"Pillow is required to load image files: {exc}")
    root = Path(root)
    entries: list[tuple[Path, int]] = []
    if manifest is not None:
        mpath = Path(manifest)
        if not mpath.exists():
            raise IngestionError(f"manifest not found: {mpath}")
        for lineno, line in enumerate(mpath.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise IngestionError(f"{mpath}:{lineno}: expected 'path<TAB>label', got {line!r}")
            entries.append((root / parts[0], int(parts[1])))
        class_count = max(lbl for _, lbl in entries) + 1 if entries else 0
    else:
        class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
        if not class_dirs:
            raise ConfigError(f"no class directories under {root}")
        for label, cdir in enumerate(class_dirs):
            files = sorted(p for p in cdir.iterdir() if p.is_file())
            if not files:
                raise ConfigError(f"class directory {cdir} is empty")
            entries.extend((f, label) for f in files)
        class_count = len(class_dirs)
    if not entries:
        raise ConfigError(f"no dataset entries found under {root}")

    images = np.empty((len(entries), height, width, 3), dtype=np.float32)
    labels = np.empty(len(entries), dtype=np.int64)
    for i, (path, label) in enumerate(entries):
        try:
            with PILImage.open(path) as im:
                im = im.convert("RGB").resize((width, height), PILImage.BILINEAR)
                images[i] = np.asarray(im, dtype=np.float32) / 255.0
        except (OSError, ValueError) as exc:
            raise IngestionError(f"cannot read image {path}: {exc}")
        labels[i] = label
    return LabeledDataset(images, labels, class_count, "all", None)


def save_dataset(ds: LabeledDataset, out_dir):
    """Persist as plain .npy files plus a JSON sidecar (deterministic bytes)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "images.npy", ds.images)
    np.save(out / "labels.npy", ds.labels)
    sidecar = {
        "class_count": ds.class_count,
        "split": ds.split,
        "meta": ds.meta.to_dict() if ds.meta else None,
    }
    (out / "dataset.json").write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")


def load_saved_dataset(in_dir) -> LabeledDataset:
    src = Path(in_dir)
    if not (src / "images.npy").exists():
        raise IngestionError(f"no saved dataset under {src}")
    sidecar = json.loads((src / "dataset.json").read_text())
    meta = SyntheticMeta.from_dict(sidecar["meta"]) if sidecar.get("meta") else None
    return LabeledDataset(np.load(src / "images.npy"), np.load(src / "labels.npy"),
                          sidecar["class_count"], sidecar["split"], meta)
