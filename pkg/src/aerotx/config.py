"""Run configuration: profiles, YAML loading, validation, derived configs.

One structured file configures every module. The channel section owns the
shared gamma_bits / sr values (the codec reads them from there, so the two
can never drift apart). Two built-in profiles: desk-scale (96x96 synthetic,
all statistical acceptance checks) and paper-scale (224x224, latency
arithmetic).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .channel import ChannelProfile
from .classifier import ClassifierConfig
from .cs import CsConfig
from .errors import ConfigError
from .policy import PolicyConfig, PolicySchedule, RewardConfig


@dataclass
class ImagingSection:
    height: int = 96
    width: int = 96
    class_count: int = 4
    images_per_class: int = 200
    noise_amplitude: float = 0.2
    motif_amplitude: float = 0.4
    train_fraction: float = 0.8
    dataset_path: str | None = None
    manifest: str | None = None


@dataclass
class ChannelSection:
    bandwidth_hz: float = 100e3
    p_eff_db: float = 30.3
    gain_levels_db: list = field(default_factory=lambda: [-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0])
    d_m: float = 1.0
    alpha: float = 2.0
    gamma_bits: int = 8
    sr: float = 0.3


@dataclass
class CsSection:
    k: int = 8
    stages: int = 3
    channels: int = 16
    pretrain_steps: int = 250
    pretrain_batch: int = 16
    stage_steps: int = 300
    stage_batch: int = 8
    finetune_steps: int = 100
    lr: float = 1e-3


@dataclass
class ClassifierSection:
    widths: list = field(default_factory=lambda: [12, 24, 48, 64])
    hidden: int = 64
    epochs: int = 10
    batch: int = 32
    lr: float = 2e-3


@dataclass
class PolicySection:
    reward_family: str = "reciprocal"
    lam: float = 2.0
    eta: float = 0.15
    total_steps: int = 900
    stage_a_fraction: float = 0.3
    stage_b_fraction: float = 0.3
    batch: int = 12
    inner_steps: int = 10
    lr: float = 1e-3
    conv_widths: list = field(default_factory=lambda: [16, 32, 64])
    embed_hidden: int = 32
    fuse_hidden: int = 64


@dataclass
class TrainingSection:
    rounds: int = 1
    skip_finetune: bool = False


@dataclass
class EvalSection:
    chunk: int = 24
    deterministic_actions: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    profile: str = "desk-scale"
    imaging: ImagingSection = field(default_factory=ImagingSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    cs: CsSection = field(default_factory=CsSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    policy: PolicySection = field(default_factory=PolicySection)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalSection = field(default_factory=EvalSection)


PROFILES = {
    # 2 reconstruction stages keep the desk training budget on small CPUs;
    # the codec default (and the paper profile) stays at 3
    "desk-scale": {"cs": {"stages": 2}},
    "paper-scale": {
        "imaging": {"height": 224, "width": 224, "images_per_class": 8},
        "cs": {"stages": 3},
    },
}


def _build_section(dc_type, data: dict, path: str, problems: list):
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(dc_type)}
    for key, value in data.items():
        if key not in names:
            problems.append(f"{path}{key}: unknown key")
            continue
        kwargs[key] = value
    try:
        return dc_type(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path.rstrip('.')}: {exc}")
        return dc_type()


def config_from_dict(data: dict) -> RunConfig:
    """Build and validate a RunConfig; raises ConfigError listing every problem."""
    problems: list[str] = []
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    kwargs = {}
    for key, value in (data or {}).items():
        if key not in sections:
            problems.append(f"{key}: unknown key")
            continue
        if dataclasses.is_dataclass(sections[key].type) or key in (
                "imaging", "channel", "cs", "classifier", "policy", "training", "eval"):
            if not isinstance(value, dict):
                problems.append(f"{key}: expected a mapping")
                continue
            kwargs[key] = _build_section(type(getattr(RunConfig(), key)), value, f"{key}.", problems)
        else:
            kwargs[key] = value
    cfg = RunConfig(**{k: v for k, v in kwargs.items() if k in sections})
    problems.extend(validate(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: RunConfig) -> list[str]:
    problems = []
    im, ch, cz = cfg.imaging, cfg.channel, cfg.cs
    if im.height % 4 or im.width % 4:
        problems.append(f"imaging.height/width: {im.height}x{im.width} not divisible by the 4x4 semantic grid")
    else:
        edge = im.height // 4
        if edge % cz.k or (im.width // 4) % cz.k:
            problems.append(f"cs.k: k must divide H/4={edge}")
        if edge % 8 or (im.width // 4) % 8:
            problems.append(f"imaging.height/width: LR extents {edge}x{im.width // 4} must be divisible by 8 "
                            "(three stride-2 stages in the policy extractor)")
    pool = 2 ** len(cfg.classifier.widths)
    if im.height % pool or im.width % pool:
        problems.append(f"classifier.widths: {len(cfg.classifier.widths)} pooling stages need extents divisible by {pool}")
    if not 1 <= ch.gamma_bits <= 16:
        problems.append(f"channel.gamma_bits: must be in 1..16, got {ch.gamma_bits}")
    if not 0 < ch.sr <= 1:
        problems.append(f"channel.sr: must be in (0, 1], got {ch.sr}")
    if not 1 <= im.class_count <= 16:
        problems.append(f"imaging.class_count: must be in 1..16, got {im.class_count}")
    if not 0 < im.train_fraction < 1:
        problems.append(f"imaging.train_fraction: must be in (0, 1), got {im.train_fraction}")
    levels = list(ch.gain_levels_db)
    if any(b <= a for a, b in zip(levels, levels[1:])):
        problems.append(f"channel.gain_levels_db: must be strictly increasing, got {levels}")
    if cfg.policy.reward_family not in ("reciprocal", "exponential"):
        problems.append(f"policy.reward_family: must be reciprocal|exponential, got {cfg.policy.reward_family!r}")
    if cfg.policy.stage_a_fraction + cfg.policy.stage_b_fraction > 1.0 + 1e-9:
        problems.append("policy.stage_a_fraction + stage_b_fraction must not exceed 1")
    if cfg.training.rounds < 1:
        problems.append(f"training.rounds: must be >= 1, got {cfg.training.rounds}")
    return problems


def load_config(path=None, profile: str | None = None, overrides: dict | None = None,
                seed: int | None = None) -> RunConfig:
    """Resolve profile defaults, an optional YAML file, then overrides."""
    data: dict = {}
    name = profile or "desk-scale"
    if name not in PROFILES:
        raise ConfigError(f"profile: unknown profile {name!r} (built in: {sorted(PROFILES)})")
    _deep_update(data, PROFILES[name])
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _deep_update(data, loaded)
    if overrides:
        _deep_update(data, overrides)
    if seed is not None:
        data["seed"] = seed
    data.setdefault("profile", name)
    return config_from_dict(data)


def _deep_update(base: dict, extra: dict):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value if not isinstance(value, dict) else json.loads(json.dumps(value))


def parse_override(expr: str) -> dict:
    """Parse one --set dotted.key=value expression into a nested dict."""
    if "=" not in expr:
        raise ConfigError(f"--set expects key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    node[parts[-1]] = value
    return out


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


# --- derived per-module configs ---------------------------------------------

def channel_profile(cfg: RunConfig) -> ChannelProfile:
    ch = cfg.channel
    return ChannelProfile(ch.bandwidth_hz, ch.p_eff_db, tuple(float(g) for g in ch.gain_levels_db),
                          ch.d_m, ch.alpha, ch.gamma_bits, ch.sr)


def cs_config(cfg: RunConfig) -> CsConfig:
    return CsConfig(cfg.cs.k, cfg.channel.sr, cfg.cs.stages, cfg.channel.gamma_bits, cfg.cs.channels)


def classifier_config(cfg: RunConfig) -> ClassifierConfig:
    c = cfg.classifier
    return ClassifierConfig(cfg.imaging.class_count, cfg.imaging.height, cfg.imaging.width,
                            tuple(c.widths), c.hidden)


def policy_config(cfg: RunConfig) -> PolicyConfig:
    p = cfg.policy
    return PolicyConfig(16, len(cfg.channel.gain_levels_db), tuple(p.conv_widths),
                        p.embed_hidden, p.fuse_hidden)


def reward_config(cfg: RunConfig) -> RewardConfig:
    return RewardConfig(cfg.policy.reward_family, cfg.policy.lam, cfg.policy.eta)


def policy_schedule(cfg: RunConfig) -> PolicySchedule:
    p = cfg.policy
    return PolicySchedule(p.total_steps, p.stage_a_fraction, p.stage_b_fraction,
                          p.batch, p.inner_steps, p.lr)
