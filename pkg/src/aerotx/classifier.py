"""Back-end target model: a small convolutional classifier.

Trained once on clean HR images and frozen; the policy only ever sees its
argmax verdicts, so any implementation with the same predict contract can
be dropped in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import DimensionError, TrainingError


@dataclass(frozen=True)
class ClassifierConfig:
    class_count: int
    height: int
    width: int
    widths: tuple[int, ...] = (12, 24, 48, 64)
    hidden: int = 64

    def __post_init__(self):
        if self.height % (2 ** len(self.widths)) or self.width % (2 ** len(self.widths)):
            raise DimensionError(
                f"input {(self.height, self.width)} must be divisible by {2 ** len(self.widths)} "
                f"({len(self.widths)} pooling stages)")


class TargetModel:
    """Conv blocks with 2x2 average pooling, then a dense softmax head."""

    def __init__(self, cfg: ClassifierConfig, params: nn.ParamSet | None = None, seed: int = 0):
        self.cfg = cfg
        if params is None:
            params = nn.ParamSet()
            rng = np.random.default_rng([seed, 0xC1A5])
            c_in = 3
            for i, c_out in enumerate(cfg.widths):
                shape = (3, 3, c_in, c_out)
                params.add(f"conv{i}/w", nn.uniform_init(rng, shape, 9 * c_in, 9 * c_out))
                params.add(f"conv{i}/b", np.zeros(c_out, dtype=np.float32))
                c_in = c_out
            params.add("head/w1", nn.uniform_init(rng, (c_in, cfg.hidden), c_in, cfg.hidden))
            params.add("head/b1", np.zeros(cfg.hidden, dtype=np.float32))
            params.add("head/w2", nn.uniform_init(rng, (cfg.hidden, cfg.class_count),
                                                  cfg.hidden, cfg.class_count))
            params.add("head/b2", np.zeros(cfg.class_count, dtype=np.float32))
        self.params = params

    def logits_tensor(self, x: nn.Tensor) -> nn.Tensor:
        h = x
        for i in range(len(self.cfg.widths)):
            h = nn.relu(nn.add(nn.conv2d(h, self.params[f"conv{i}/w"]), self.params[f"conv{i}/b"]))
            h = nn.avg_pool2(h)
        h = nn.global_avg_pool(h)
        h = nn.relu(nn.dense(h, self.params["head/w1"], self.params["head/b1"]))
        return nn.dense(h, self.params["head/w2"], self.params["head/b2"])

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        """Class probabilities for a batch of (H, W, 3) images."""
        if images.ndim != 4 or images.shape[1:3] != (self.cfg.height, self.cfg.width):
            raise DimensionError(
                f"expected (B, {self.cfg.height}, {self.cfg.width}, 3), got {images.shape}")
        logits = self.logits_tensor(nn.constant(images)).data
        return nn.softmax(logits)

    def predict(self, img: np.ndarray):
        """(probabilities, argmax label); ties break to the lowest index."""
        probs = self.predict_batch(img[None])[0]
        return probs, int(np.argmax(probs))


@dataclass
class ClassifierLog:
    losses: list[float] = field(default_factory=list)
    train_accuracy: float | None = None
    heldout_accuracy: float | None = None


def accuracy(model: TargetModel, images: np.ndarray, labels: np.ndarray,
             chunk: int = 64) -> float:
    hits = 0
    for i in range(0, len(images), chunk):
        probs = model.predict_batch(images[i:i + chunk])
        hits += int(np.sum(np.argmax(probs, axis=1) == labels[i:i + chunk]))
    return hits / len(images)


def train_classifier(images: np.ndarray, labels: np.ndarray, cfg: ClassifierConfig,
                     epochs: int = 10, batch: int = 32, lr: float = 1e-3, seed: int = 0,
                     heldout: tuple[np.ndarray, np.ndarray] | None = None
                     ) -> tuple[TargetModel, ClassifierLog]:
    """Cross-entropy training on clean images; the result is frozen by callers."""
    if labels.min() < 0 or labels.max() >= cfg.class_count:
        raise TrainingError(f"labels outside [0, {cfg.class_count})")
    model = TargetModel(cfg, seed=seed)
    rng = np.random.default_rng([seed, 0x7A6])
    log = ClassifierLog()
    n = len(images)
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch):
            idx = order[i:i + batch]
            model.params.zero_grad()
            logits = model.logits_tensor(nn.constant(images[idx]))
            loss = nn.softmax_cross_entropy(logits, labels[idx])
            if not np.isfinite(float(loss.data)):
                raise TrainingError("classifier loss diverged (non-finite)")
            loss.backward()
            model.params.adam_step(lr)
            log.losses.append(float(loss.data))
    log.train_accuracy = accuracy(model, images, labels)
    if heldout is not None:
        log.heldout_accuracy = accuracy(model, heldout[0], heldout[1])
    return model, log
