"""Channel-aware Bernoulli block-selection policy and its REINFORCE training.

The policy fuses an LR-image feature extractor (theta) with a gain
embedding (phi) through a decision MLP (psi) into one Bernoulli
probability per semantic block. Updates follow the likelihood-ratio form
grad log pi * (R - R_baseline) with the self-critical thresholded action
as the baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, NumericalError, TrainingError

PROB_EPS = 1e-6


@dataclass(frozen=True)
class PolicyConfig:
    n_blocks: int = 16
    n_gains: int = 7
    conv_widths: tuple[int, ...] = (16, 32, 64)
    embed_hidden: int = 32
    fuse_hidden: int = 64

    @property
    def feature_dim(self) -> int:
        return self.conv_widths[-1]


class PolicyModel:
    """p = sigmoid(f_psi(f_theta(lr) + f_phi(gain_onehot))), clamped to (0, 1)."""

    def __init__(self, cfg: PolicyConfig, params: nn.ParamSet | None = None, seed: int = 0):
        self.cfg = cfg
        if params is None:
            params = nn.ParamSet()
            rng = np.random.default_rng([seed, 0xB0])
            c_in = 3
            for i, c_out in enumerate(cfg.conv_widths):
                params.add(f"theta/conv{i}/w", nn.uniform_init(rng, (3, 3, c_in, c_out), 9 * c_in, 9 * c_out))
                params.add(f"theta/conv{i}/b", np.zeros(c_out, dtype=np.float32))
                c_in = c_out
            d = cfg.feature_dim
            params.add("phi/w1", nn.uniform_init(rng, (cfg.n_gains, cfg.embed_hidden), cfg.n_gains, cfg.embed_hidden))
            params.add("phi/b1", np.zeros(cfg.embed_hidden, dtype=np.float32))
            params.add("phi/w2", nn.uniform_init(rng, (cfg.embed_hidden, d), cfg.embed_hidden, d))
            params.add("phi/b2", np.zeros(d, dtype=np.float32))
            params.add("psi/w1", nn.uniform_init(rng, (d, cfg.fuse_hidden), d, cfg.fuse_hidden))
            params.add("psi/b1", np.zeros(cfg.fuse_hidden, dtype=np.float32))
            params.add("psi/w2", nn.uniform_init(rng, (cfg.fuse_hidden, cfg.n_blocks), cfg.fuse_hidden, cfg.n_blocks))
            params.add("psi/b2", np.zeros(cfg.n_blocks, dtype=np.float32))
        self.params = params

    def param_group(self, prefix: str) -> set[str]:
        return {n for n in self.params.names() if n.startswith(prefix + "/")}

    def logits_tensor(self, lr_batch: nn.Tensor, gain_onehot: nn.Tensor) -> nn.Tensor:
        h = lr_batch
        for i in range(len(self.cfg.conv_widths)):
            h = nn.relu(nn.add(nn.conv2d(h, self.params[f"theta/conv{i}/w"], stride=2),
                               self.params[f"theta/conv{i}/b"]))
        feat = nn.global_avg_pool(h)
        g = nn.relu(nn.dense(gain_onehot, self.params["phi/w1"], self.params["phi/b1"]))
        g = nn.dense(g, self.params["phi/w2"], self.params["phi/b2"])
        fused = nn.relu(nn.dense(nn.add(feat, g), self.params["psi/w1"], self.params["psi/b1"]))
        return nn.dense(fused, self.params["psi/w2"], self.params["psi/b2"])

    def forward_tensor(self, lr_batch: nn.Tensor, gain_onehot: nn.Tensor) -> nn.Tensor:
        logits = self.logits_tensor(lr_batch, gain_onehot)
        return nn.clip(nn.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)

    def gain_onehot(self, gain_indices: np.ndarray) -> np.ndarray:
        oh = np.zeros((len(gain_indices), self.cfg.n_gains), dtype=np.float32)
        oh[np.arange(len(gain_indices)), gain_indices] = 1.0
        return oh

    def probs(self, lr_images: np.ndarray, gain_indices: np.ndarray) -> np.ndarray:
        """Selection probabilities, (B, n_blocks); deterministic in the inputs."""
        if lr_images.ndim == 3:
            lr_images = lr_images[None]
        out = self.forward_tensor(nn.constant(lr_images),
                                  nn.constant(self.gain_onehot(np.atleast_1d(gain_indices)))).data
        if not np.all(np.isfinite(out)):
            raise NumericalError("policy forward produced non-finite probabilities")
        return out


def log_prob(p: np.ndarray, action: np.ndarray) -> float:
    """Joint log density of a binary action under independent Bernoullis."""
    p64 = np.asarray(p, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64)
    return float(np.sum(a * np.log(p64) + (1.0 - a) * np.log1p(-p64)))


def sample_action(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli draw per block."""
    return (rng.random(p.shape) < p).astype(np.uint8)


def baseline_action(p: np.ndarray) -> np.ndarray:
    """Deterministic self-critical action: select where p >= 1 - p."""
    return (np.asarray(p) >= 0.5).astype(np.uint8)


@dataclass(frozen=True)
class RewardConfig:
    family: str = "reciprocal"       # reciprocal: 1/(1+lam*T); exponential: exp(-lam*T)
    lam: float = 2.0
    eta: float = 0.15                # flat penalty on misclassification

    def __post_init__(self):
        problems = []
        if self.family not in ("reciprocal", "exponential"):
            problems.append(f"reward.family must be reciprocal|exponential, got {self.family!r}")
        if self.lam <= 0:
            problems.append(f"reward.lam must be positive, got {self.lam}")
        if self.family == "reciprocal" and not 0 < self.eta < 1:
            problems.append(f"reciprocal reward needs eta in (0, 1), got {self.eta}")
        if problems:
            raise ConfigError(problems)


def reward(correct: bool, latency_s: float, cfg: RewardConfig) -> float:
    """Latency-decreasing payoff on success, flat penalty otherwise."""
    if not correct:
        return cfg.eta
    if cfg.family == "reciprocal":
        return 1.0 / (1.0 + cfg.lam * latency_s)
    return float(np.exp(-cfg.lam * latency_s))


def reward_batch(correct: np.ndarray, latency_s: np.ndarray, cfg: RewardConfig) -> np.ndarray:
    if cfg.family == "reciprocal":
        good = 1.0 / (1.0 + cfg.lam * latency_s)
    else:
        good = np.exp(-cfg.lam * latency_s)
    return np.where(correct, good, cfg.eta)


@dataclass
class StepStats:
    mean_reward: float
    mean_baseline_reward: float
    mean_advantage: float
    mean_blocks: float


def reinforce_step(model: PolicyModel, lr_images: np.ndarray, gain_indices: np.ndarray,
                   actions: np.ndarray, advantages: np.ndarray, lr: float = 1e-3,
                   trainable: set[str] | None = None) -> float:
    """One likelihood-ratio ascent step on mean(log pi(a) * advantage).

    Rewards enter only through the advantages; returns the objective value.
    """
    model.params.zero_grad()
    z = model.logits_tensor(nn.constant(lr_images),
                            nn.constant(model.gain_onehot(gain_indices)))
    logp = nn.bernoulli_log_prob_from_logits(z, actions)
    # ascend: minimize -mean(logp * adv)
    loss = nn.mean_all(nn.mul(logp, nn.constant(-np.asarray(advantages, dtype=np.float32))))
    if not np.isfinite(float(loss.data)):
        raise TrainingError("policy objective diverged (non-finite)")
    loss.backward()
    model.params.adam_step(lr, trainable=trainable)
    return -float(loss.data)


@dataclass(frozen=True)
class PolicySchedule:
    """Three-stage schedule: A trains theta+psi at a gain held fixed per
    outer iteration; B trains phi+psi at an image held fixed per outer
    iteration; C trains everything with both sampled randomly."""
    total_steps: int = 900
    stage_a_fraction: float = 0.3
    stage_b_fraction: float = 0.3
    batch: int = 12
    inner_steps: int = 10           # steps per outer iteration in stages A/B
    lr: float = 1e-3

    def stage_steps(self) -> tuple[int, int, int]:
        a = int(round(self.total_steps * self.stage_a_fraction))
        b = int(round(self.total_steps * self.stage_b_fraction))
        return a, b, max(self.total_steps - a - b, 0)


def train_policy(model: PolicyModel, env, reward_cfg: RewardConfig,
                 schedule: PolicySchedule, seed: int = 0) -> list[dict]:
    """Run the three-stage REINFORCE schedule against a frozen environment.

    env provides lr_images (N, h, w, 3), n_images, n_gains, and
    reward_batch(image_ids, gain_indices, actions) -> rewards. Returns the
    training log, one record per step.
    """
    rng = np.random.default_rng([seed, 0x9E1])
    n_img = env.n_images
    n_gains = env.n_gains
    theta = model.param_group("theta")
    phi = model.param_group("phi")
    psi = model.param_group("psi")
    stages = [
        ("A", theta | psi),
        ("B", phi | psi),
        ("C", theta | phi | psi),
    ]
    steps_per_stage = schedule.stage_steps()
    log: list[dict] = []
    step = 0
    for (stage_name, trainable), n_steps in zip(stages, steps_per_stage):
        for s in range(n_steps):
            outer = s // schedule.inner_steps
            if stage_name == "A":
                gains = np.full(schedule.batch, outer % n_gains, dtype=np.int64)
                imgs = rng.integers(0, n_img, size=schedule.batch)
            elif stage_name == "B":
                imgs = np.full(schedule.batch, outer % n_img, dtype=np.int64)
                gains = rng.integers(0, n_gains, size=schedule.batch)
            else:
                imgs = rng.integers(0, n_img, size=schedule.batch)
                gains = rng.integers(0, n_gains, size=schedule.batch)
            lr_batch = env.lr_images[imgs]
            p = model.probs(lr_batch, gains)
            actions = sample_action(p, rng)
            base_actions = baseline_action(p)
            # one env call so coincident sampled/baseline actions dedupe
            both = env.reward_batch(np.concatenate([imgs, imgs]),
                                    np.concatenate([gains, gains]),
                                    np.concatenate([actions, base_actions]))
            r, r_base = both[:len(imgs)], both[len(imgs):]
            adv = r - r_base
            reinforce_step(model, lr_batch, gains, actions, adv,
                           lr=schedule.lr, trainable=trainable)
            log.append({
                "step": step,
                "stage": stage_name,
                "mean_reward": float(np.mean(r)),
                "mean_baseline_reward": float(np.mean(r_base)),
                "mean_advantage": float(np.mean(adv)),
                "mean_blocks": float(np.mean(actions.sum(axis=1))),
            })
            step += 1
    return log
