"""End-to-end episode execution, evaluation reports, and system training.

The pipeline per episode: LR preview -> policy -> compress selected blocks
-> quantize -> uplink latency -> reconstruct -> classify -> reward.
Evaluation mirrors the comparison protocol: every baseline is constrained
to the learned policy's block count for the same (image, gain) pair.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, channel, classifier, config as config_mod, cs, imaging, nn, policy
from .errors import AerotxError, ConfigError

LEARNED = "learned"
BASELINE_ORDER = [
    baselines.BaselineId.ROW_ORDER,
    baselines.BaselineId.COLUMN_ORDER,
    baselines.BaselineId.CLOCKWISE_SPIRAL,
    baselines.BaselineId.COUNTER_CLOCKWISE_SPIRAL,
    baselines.BaselineId.RANDOM,
    baselines.BaselineId.SALIENCY,
]


@dataclass
class SimModels:
    kernel: cs.SamplingKernel
    kappa_prime: np.ndarray
    recon: cs.ReconModel
    target: classifier.TargetModel
    selector: policy.PolicyModel
    ranges: cs.QuantRanges


@dataclass
class EpisodeResult:
    image_id: int
    gain_index: int
    mask: np.ndarray
    n_blocks: int
    payload_bytes: float          # idealized accounting (headerless)
    wire_bytes: int               # exact packed payload incl 3-byte header
    latency_s: float
    predicted: int
    label: int
    correct: bool
    reward: float


def episode_rng(seed: int, image_id: int, gain_index: int, tag: int = 0) -> np.random.Generator:
    """Per-episode generator independent of batching and worker count."""
    return np.random.default_rng([seed, 0xE9, image_id, gain_index, tag])


def run_episode(img: np.ndarray, label: int, gain: channel.GainState,
                models: SimModels, profile: channel.ChannelProfile,
                reward_cfg: policy.RewardConfig, rng: np.random.Generator,
                image_id: int = 0, deterministic_action: bool = False,
                mask_override: np.ndarray | None = None) -> EpisodeResult:
    """Execute the full pipeline for one image at one gain.

    mask_override skips the policy (used for baseline episodes); otherwise
    the action is sampled from the policy (or thresholded when
    deterministic_action is set).
    """
    try:
        lr = imaging.make_lr(img)
        if mask_override is not None:
            mask = np.asarray(mask_override, dtype=np.uint8)
        else:
            p = models.selector.probs(lr[None], np.array([gain.index]))[0]
            mask = policy.baseline_action(p) if deterministic_action else policy.sample_action(p, rng)
    except AerotxError as exc:
        raise type(exc)(f"policy stage: {exc}") from exc
    n_blocks = int(mask.sum())
    h, w, _ = img.shape
    try:
        meas = cs.compress(img, models.kernel, mask=mask)
        payload = cs.encode_payload(meas, profile.gamma_bits, models.ranges, gain.index)
        decoded, _ = cs.decode_payload(payload, profile.gamma_bits, models.ranges, meas.grid_shape)
    except AerotxError as exc:
        raise type(exc)(f"codec stage: {exc}") from exc
    bits = channel.payload_bits_for(profile, h, w, n_blocks)
    rate = channel.uplink_rate(gain, profile)
    latency_s = channel.latency(bits, rate)
    try:
        x_hat = cs.reconstruct(decoded, models.recon).x_hat
        _, predicted = models.target.predict(np.clip(x_hat, 0.0, 1.0))
    except AerotxError as exc:
        raise type(exc)(f"reconstruction stage: {exc}") from exc
    correct = predicted == label
    r = policy.reward(correct, latency_s, reward_cfg)
    return EpisodeResult(image_id, gain.index, mask, n_blocks, bits / 8.0,
                         len(payload), latency_s, predicted, int(label), bool(correct), r)


class RolloutEnv:
    """Frozen-model environment evaluating masks in chunked batches.

    Measurement grids are compressed and quantizer-round-tripped once per
    image (masking commutes with the quantizer because zero is exactly
    representable), so each mask evaluation costs one reconstruction plus
    one classification.
    """

    CACHE_LIMIT = 200_000

    def __init__(self, images: np.ndarray, labels: np.ndarray, models: SimModels,
                 profile: channel.ChannelProfile, reward_cfg: policy.RewardConfig,
                 chunk: int = 32, quantize: bool = True):
        self.images = images
        self.labels = labels
        self.models = models
        self.profile = profile
        self.reward_cfg = reward_cfg
        self.chunk = chunk
        self.lr_images = np.stack([imaging.make_lr(img) for img in images])
        meas = cs.compress_batch(images, models.kernel)
        if quantize:
            meas = cs.quantize_roundtrip(meas, profile.gamma_bits, models.ranges)
        self.meas_dq = meas
        self.rates = np.array(channel.rate_table(profile))
        h, w = images.shape[1:3]
        self.bits_per_block = channel.payload_bits_for(profile, h, w, 1)
        self._pred_cache: dict[int, int] = {}

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def n_gains(self) -> int:
        return self.profile.n_levels

    def _predict_masked(self, image_ids: np.ndarray, masks: np.ndarray) -> np.ndarray:
        preds = np.empty(len(image_ids), dtype=np.int64)
        for i in range(0, len(image_ids), self.chunk):
            sl = slice(i, min(i + self.chunk, len(image_ids)))
            y = cs.apply_mask(self.meas_dq[image_ids[sl]], masks[sl])
            x_hat = cs.reconstruct_batch(y, self.models.recon)
            probs = self.models.target.predict_batch(np.clip(x_hat, 0.0, 1.0))
            preds[sl] = np.argmax(probs, axis=1)
        return preds

    def run_masks(self, image_ids, gain_indices, masks) -> dict[str, np.ndarray]:
        """Reconstruct + classify under the given masks; returns episode arrays.

        The prediction depends only on (image, mask), so duplicate pairs
        (baseline action equal to the sampled one, count-matched baselines
        repeating across gains) are evaluated once and scattered back.
        """
        image_ids = np.asarray(image_ids, dtype=np.int64)
        gain_indices = np.asarray(gain_indices)
        masks = np.asarray(masks, dtype=np.float32)
        mask_ints = (masks.astype(np.int64) << np.arange(16, dtype=np.int64)).sum(axis=1)
        keys = image_ids * 65536 + mask_ints
        uniq, inverse = np.unique(keys, return_inverse=True)
        uniq_preds = np.empty(len(uniq), dtype=np.int64)
        fresh = [i for i, key in enumerate(uniq) if int(key) not in self._pred_cache]
        if fresh:
            fresh_keys = uniq[fresh]
            fresh_masks = ((fresh_keys[:, None] & 0xFFFF) >> np.arange(16, dtype=np.int64)) & 1
            fresh_preds = self._predict_masked(fresh_keys >> 16, fresh_masks.astype(np.float32))
            if len(self._pred_cache) + len(fresh) > self.CACHE_LIMIT:
                self._pred_cache.clear()
            for key, pred in zip(fresh_keys, fresh_preds):
                self._pred_cache[int(key)] = int(pred)
        for i, key in enumerate(uniq):
            uniq_preds[i] = self._pred_cache[int(key)]
        preds = uniq_preds[inverse]
        n_blocks = masks.sum(axis=1).astype(np.int64)
        bits = n_blocks.astype(np.float64) * self.bits_per_block
        latency_s = bits / self.rates[gain_indices]
        correct = preds == self.labels[image_ids]
        rewards = policy.reward_batch(correct, latency_s, self.reward_cfg)
        return {
            "predicted": preds,
            "correct": correct,
            "n_blocks": n_blocks,
            "bits": bits,
            "latency_s": latency_s,
            "reward": rewards,
        }

    def reward_batch(self, image_ids, gain_indices, actions) -> np.ndarray:
        return self.run_masks(image_ids, gain_indices, actions)["reward"]


@dataclass
class EvalReport:
    n_test: int
    gains_db: list[float]
    policies: list[str]
    per_gain: list[dict]
    episodes: list[dict] = field(default_factory=list, repr=False)

    def to_summary_dict(self) -> dict:
        return {
            "n_test": self.n_test,
            "gains_db": self.gains_db,
            "policies": self.policies,
            "per_gain": self.per_gain,
        }

    def accuracy_table(self) -> str:
        """Human-readable per-gain accuracy comparison."""
        lines = []
        head = f"{'gain(dB)':>9} {'rate(kbps)':>11} {'N^a':>7} {'B(kB)':>8} {'T(ms)':>8}"
        for name in self.policies:
            head += f" {name:>12}"
        lines.append(head)
        for row in self.per_gain:
            learned = row["learned"]
            line = (f"{row['gain_db']:>9.0f} {row['rate_bps'] / 1e3:>11.1f} "
                    f"{learned['mean_blocks']:>7.3f} {learned['mean_bytes_kb']:>8.3f} "
                    f"{learned['mean_latency_ms']:>8.1f}")
            for name in self.policies:
                acc = learned["accuracy"] if name == LEARNED else row["baselines"][name]["accuracy"]
                line += f" {acc:>12.3f}"
            lines.append(line)
        return "\n".join(lines)


def _conditional_accuracy(n_blocks: np.ndarray, correct: np.ndarray) -> dict[str, float]:
    out = {}
    for n in sorted(set(int(v) for v in n_blocks)):
        sel = n_blocks == n
        out[str(n)] = float(correct[sel].mean())
    return out


def evaluate(test_images: np.ndarray, test_labels: np.ndarray, models: SimModels,
             profile: channel.ChannelProfile, reward_cfg: policy.RewardConfig,
             seed: int = 0, deterministic_actions: bool = False,
             chunk: int = 32) -> EvalReport:
    """Run the learned policy and all six count-matched baselines per gain.

    All (policy, image, gain) episodes are assembled first and reconstructed
    in one deduplicated pass.
    """
    env = RolloutEnv(test_images, test_labels, models, profile, reward_cfg, chunk=chunk)
    n_test = env.n_images
    policy_names = [LEARNED] + [b.value for b in BASELINE_ORDER]
    all_ids = np.arange(n_test)
    masks_by: dict[tuple[str, int], np.ndarray] = {}
    for j in range(profile.n_levels):
        gains = np.full(n_test, j)
        p = np.vstack([models.selector.probs(env.lr_images[i:i + chunk], gains[i:i + chunk])
                       for i in range(0, n_test, chunk)])
        if deterministic_actions:
            learned_masks = policy.baseline_action(p)
        else:
            learned_masks = np.stack([
                policy.sample_action(p[i], episode_rng(seed, i, j)) for i in range(n_test)])
        masks_by[(LEARNED, j)] = learned_masks
        counts = learned_masks.sum(axis=1).astype(np.int64)
        for b in BASELINE_ORDER:
            masks_by[(b.value, j)] = np.stack([
                baselines.select_blocks(
                    b, int(counts[i]), lr_image=env.lr_images[i],
                    rng=episode_rng(seed, i, j, tag=1 + BASELINE_ORDER.index(b)))
                for i in range(n_test)])

    groups = [(name, j) for j in range(profile.n_levels) for name in policy_names]
    big_ids = np.concatenate([all_ids for _ in groups])
    big_gains = np.concatenate([np.full(n_test, j) for _, j in groups])
    big_masks = np.concatenate([masks_by[g] for g in groups])
    stats = env.run_masks(big_ids, big_gains, big_masks)

    per_gain = []
    episodes: list[dict] = []
    for j in range(profile.n_levels):
        gain_row: dict = {
            "gain_index": j,
            "gain_db": float(profile.gain_levels_db[j]),
            "rate_bps": float(env.rates[j]),
            "baselines": {},
        }
        for name in policy_names:
            gidx = groups.index((name, j))
            sl = slice(gidx * n_test, (gidx + 1) * n_test)
            sub = {k: v[sl] for k, v in stats.items()}
            summary = {
                "accuracy": float(sub["correct"].mean()),
                "conditional_accuracy": _conditional_accuracy(sub["n_blocks"], sub["correct"]),
            }
            if name == LEARNED:
                counts = sub["n_blocks"]
                summary.update({
                    "mean_blocks": float(counts.mean()),
                    "mean_bytes_kb": float(sub["bits"].mean() / 8.0 / 1000.0),
                    "mean_latency_ms": float(sub["latency_s"].mean() * 1e3),
                    "histogram": np.bincount(counts, minlength=17)[:17].tolist(),
                })
                gain_row["learned"] = summary
            else:
                gain_row["baselines"][name] = summary
            episodes.extend(_episode_rows(name, j, all_ids, masks_by[(name, j)], sub, test_labels))
        per_gain.append(gain_row)
    return EvalReport(n_test, [float(g) for g in profile.gain_levels_db],
                      policy_names, per_gain, episodes)


def _episode_rows(policy_name, gain_index, image_ids, masks, stats, labels):
    rows = []
    for i, img_id in enumerate(image_ids):
        rows.append({
            "policy": policy_name,
            "image_id": int(img_id),
            "gain_index": int(gain_index),
            "mask": cs.mask_to_int(masks[i]),
            "n_blocks": int(stats["n_blocks"][i]),
            "payload_bytes": float(stats["bits"][i] / 8.0),
            "latency_ms": float(stats["latency_s"][i] * 1e3),
            "predicted": int(stats["predicted"][i]),
            "label": int(labels[img_id]),
            "correct": bool(stats["correct"][i]),
            "reward": float(stats["reward"][i]),
        })
    return rows


# --- run directory IO --------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def update_manifest(out_dir, command: str, cfg_hash: str, seed: int, artifacts: dict[str, str]):
    """Record (config hash, seed, artifact hashes) for one command."""
    path = Path(out_dir) / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest[command] = {"config_hash": cfg_hash, "seed": seed, "artifacts": artifacts}
    write_json(path, manifest)


def hash_artifacts(out_dir, names) -> dict[str, str]:
    out = {}
    for name in names:
        p = Path(out_dir) / name
        if p.exists():
            out[name] = sha256_file(p)
    return out


# --- training phases ---------------------------------------------------------

KERNEL_FILE = "models/cs_kernel.bin"
RECON_FILE = "models/recon.bin"
RECON_PREFINETUNE_FILE = "models/recon_prefinetune.bin"
CLASSIFIER_FILE = "models/classifier.bin"
POLICY_FILE = "models/policy.bin"
DATA_DIR = "data"
MODEL_FILES = [KERNEL_FILE, RECON_FILE, RECON_PREFINETUNE_FILE, CLASSIFIER_FILE, POLICY_FILE]


def require_artifacts(out_dir, names_and_commands):
    """Fail with the prerequisite command name when an artifact is missing."""
    for name, command in names_and_commands:
        if not (Path(out_dir) / name).exists():
            raise ConfigError(f"missing artifact {name}; run '{command}' first")


def prepare_data(cfg, out_dir):
    """Load the persisted dataset, a configured external corpus, or generate
    the synthetic corpus (and persist it). Returns (train, test)."""
    out = Path(out_dir)
    data_dir = out / DATA_DIR
    im = cfg.imaging
    if im.dataset_path:
        full = imaging.load_dataset(im.dataset_path, im.height, im.width, manifest=im.manifest)
    elif (data_dir / "images.npy").exists():
        full = imaging.load_saved_dataset(data_dir)
    else:
        full = imaging.generate_synthetic(cfg.seed, im.images_per_class, im.class_count,
                                          im.height, im.width, im.noise_amplitude,
                                          im.motif_amplitude)
        imaging.save_dataset(full, data_dir)
    train, test = imaging.split_dataset(full, im.train_fraction, seed=cfg.seed)
    return train, test


def train_cs_phase(cfg, out_dir, train_images):
    """Kernel pretraining, quantizer calibration, stage training; persists
    cs_kernel.bin and recon.bin."""
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    cs_cfg = config_mod.cs_config(cfg)
    kernel, kprime, pre_log = cs.pretrain_kernel(
        train_images, cs_cfg, steps=cfg.cs.pretrain_steps, batch=cfg.cs.pretrain_batch,
        lr=cfg.cs.lr, seed=cfg.seed)
    ranges = cs.QuantRanges.calibrate(cs.compress_batch(train_images, kernel))
    nn.save_tensors(out / KERNEL_FILE, {
        "kappa": kernel.kernel,
        "kappa_prime": kprime,
        "quant_half_width": ranges.half_width,
    })
    recon, stage_log = cs.train_stages(
        train_images, kernel, cs_cfg, steps=cfg.cs.stage_steps, batch=cfg.cs.stage_batch,
        lr=cfg.cs.lr, seed=cfg.seed, init_kernel=kprime)
    recon.params.save(out / RECON_FILE)
    write_json(out / "logs/cs_pretrain.json", {"losses": pre_log.losses})
    write_json(out / "logs/cs_stages.json", {"losses": stage_log.losses})
    return kernel, kprime, ranges, recon


def train_classifier_phase(cfg, out_dir, train, test):
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    cls_cfg = config_mod.classifier_config(cfg)
    model, log = classifier.train_classifier(
        train.images, train.labels, cls_cfg, epochs=cfg.classifier.epochs,
        batch=cfg.classifier.batch, lr=cfg.classifier.lr, seed=cfg.seed,
        heldout=(test.images, test.labels))
    model.params.save(out / CLASSIFIER_FILE)
    write_json(out / "logs/classifier.json", {
        "losses": log.losses,
        "train_accuracy": log.train_accuracy,
        "heldout_accuracy": log.heldout_accuracy,
    })
    return model


def train_policy_phase(cfg, out_dir, train, models, selector=None, log_suffix=""):
    """REINFORCE over the frozen pipeline; persists policy.bin and the log."""
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    profile = config_mod.channel_profile(cfg)
    reward_cfg = config_mod.reward_config(cfg)
    if selector is None:
        selector = policy.PolicyModel(config_mod.policy_config(cfg), seed=cfg.seed)
    models = SimModels(models.kernel, models.kappa_prime, models.recon, models.target,
                       selector, models.ranges)
    env = RolloutEnv(train.images, train.labels, models, profile, reward_cfg,
                     chunk=cfg.eval.chunk)
    log = policy.train_policy(selector, env, reward_cfg,
                              config_mod.policy_schedule(cfg), seed=cfg.seed)
    selector.params.save(out / POLICY_FILE)
    write_jsonl(out / f"logs/policy_train{log_suffix}.jsonl", log)
    return selector, log


def finetune_cs_phase(cfg, out_dir, train, kernel, kprime, recon, selector):
    """Continue stage training with measurements masked by policy actions."""
    out = Path(out_dir)
    cs_cfg = config_mod.cs_config(cfg)
    lr_images = np.stack([imaging.make_lr(img) for img in train.images])
    n_gains = len(cfg.channel.gain_levels_db)

    def mask_sampler(rng, idx):
        gains = rng.integers(0, n_gains, size=len(idx))
        p = selector.probs(lr_images[idx], gains)
        return policy.sample_action(p, rng)

    recon.params.save(out / RECON_PREFINETUNE_FILE)
    recon, log = cs.train_stages(
        train.images, kernel, cs_cfg, steps=cfg.cs.finetune_steps, batch=cfg.cs.stage_batch,
        lr=cfg.cs.lr, seed=cfg.seed + 1, model=recon, mask_sampler=mask_sampler)
    recon.params.save(out / RECON_FILE)
    write_json(out / "logs/cs_finetune.json", {"losses": log.losses})
    return recon


def train_system(cfg, out_dir):
    """Full alternating optimization: CS, classifier, then per round the
    policy and (optionally) a policy-driven CS finetune. Persists every
    artifact plus the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = prepare_data(cfg, out_dir)
    kernel, kprime, ranges, recon = train_cs_phase(cfg, out_dir, train.images)
    target = train_classifier_phase(cfg, out_dir, train, test)
    models = SimModels(kernel, kprime, recon, target, None, ranges)
    selector = None
    for r in range(cfg.training.rounds):
        suffix = "" if r == 0 else f"_round{r}"
        selector, _ = train_policy_phase(cfg, out_dir, train, models,
                                         selector=selector, log_suffix=suffix)
        if not cfg.training.skip_finetune:
            models.recon = finetune_cs_phase(cfg, out_dir, train, kernel, kprime,
                                             models.recon, selector)
    cfg_hash = config_mod.config_hash(cfg)
    update_manifest(out_dir, "train-all", cfg_hash, cfg.seed,
                    hash_artifacts(out_dir, MODEL_FILES))
    return SimModels(kernel, kprime, models.recon, target, selector, ranges)


def load_models(cfg, out_dir) -> SimModels:
    """Rebuild every model from the persisted artifacts."""
    out = Path(out_dir)
    require_artifacts(out_dir, [(KERNEL_FILE, "train-cs"), (RECON_FILE, "train-cs"),
                                (CLASSIFIER_FILE, "train-classifier"),
                                (POLICY_FILE, "train-policy")])
    blobs = nn.load_tensors(out / KERNEL_FILE)
    kernel = cs.SamplingKernel(blobs["kappa"])
    kprime = blobs["kappa_prime"]
    ranges = cs.QuantRanges(blobs["quant_half_width"])
    cs_cfg = config_mod.cs_config(cfg)
    recon_params = nn.ParamSet()
    recon_params.load(out / RECON_FILE)
    recon = cs.ReconModel(cs_cfg, kernel, params=recon_params, init_kernel=kprime)
    cls = classifier.TargetModel(config_mod.classifier_config(cfg))
    cls.params.load(out / CLASSIFIER_FILE)
    selector = policy.PolicyModel(config_mod.policy_config(cfg))
    selector.params.load(out / POLICY_FILE)
    return SimModels(kernel, kprime, recon, cls, selector, ranges)
