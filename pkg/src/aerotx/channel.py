"""Rayleigh-fading uplink model: gain sampling, rate, payload size, latency."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ChannelError, ConfigError

# Profile reproducing the published 7-level rate table: with w = 100 kHz and
# an effective SNR constant of 30.3 dB, the Shannon rate at gains
# -30..+30 dB lands within 0.1% of {105, 355, 675, 1006, 1338, 1670, 2003} kbps.
PAPER_GAIN_LEVELS_DB = (-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0)
PAPER_RATE_TABLE_KBPS = (105.0, 355.0, 675.0, 1006.0, 1338.0, 1670.0, 2003.0)
PAPER_FULL_LATENCY_MS = (3438, 1018, 535, 359, 270, 216, 180)


@dataclass(frozen=True)
class ChannelProfile:
    bandwidth_hz: float = 100e3
    p_eff_db: float = 30.3
    gain_levels_db: tuple[float, ...] = PAPER_GAIN_LEVELS_DB
    d_m: float = 1.0
    alpha: float = 2.0
    gamma_bits: int = 8
    sr: float = 0.3

    def __post_init__(self):
        problems = []
        if self.bandwidth_hz <= 0:
            problems.append(f"channel.bandwidth_hz must be positive, got {self.bandwidth_hz}")
        levels = tuple(self.gain_levels_db)
        if any(b <= a for a, b in zip(levels, levels[1:])):
            problems.append(f"channel.gain_levels_db must be strictly increasing, got {levels}")
        if self.d_m <= 0:
            problems.append(f"channel.d_m must be positive, got {self.d_m}")
        if self.alpha <= 0:
            problems.append(f"channel.alpha must be positive, got {self.alpha}")
        if not 1 <= self.gamma_bits <= 16:
            problems.append(f"channel.gamma_bits must be in 1..16, got {self.gamma_bits}")
        if not 0 < self.sr <= 1:
            problems.append(f"channel.sr must be in (0, 1], got {self.sr}")
        if problems:
            raise ConfigError(problems)

    @property
    def n_levels(self) -> int:
        return len(self.gain_levels_db)


@dataclass(frozen=True)
class GainState:
    index: int
    level_db: float
    raw_db: float | None = None   # continuous gain before quantization


def quantize_gain(raw_db: float, profile: ChannelProfile) -> GainState:
    """Snap a continuous dB gain to the nearest profile level (ties go low)."""
    levels = np.asarray(profile.gain_levels_db)
    idx = int(np.argmin(np.abs(levels - raw_db)))
    return GainState(idx, float(levels[idx]), raw_db)


def sample_gain(profile: ChannelProfile, rng: np.random.Generator) -> GainState:
    """Draw g = d^-alpha * u with u Rayleigh of unit mean, then quantize in dB."""
    u = rng.rayleigh(scale=math.sqrt(2.0 / math.pi))
    linear = profile.d_m ** (-profile.alpha) * u
    raw_db = 10.0 * math.log10(max(linear, 1e-300))
    return quantize_gain(raw_db, profile)


def gain_state(profile: ChannelProfile, index: int) -> GainState:
    return GainState(index, float(profile.gain_levels_db[index]))


def uplink_rate(gain: GainState | float, profile: ChannelProfile) -> float:
    """Shannon-style uplink rate in bits/s for a quantized gain."""
    g_db = gain.level_db if isinstance(gain, GainState) else float(gain)
    snr = 10.0 ** ((profile.p_eff_db + g_db) / 10.0)
    return profile.bandwidth_hz * math.log2(1.0 + snr)


@dataclass(frozen=True)
class PayloadSpec:
    gamma_bits: int
    sr: float
    height: int
    width: int
    n_blocks: int                         # selected semantic blocks N^a
    measurements_per_block: int | None = None   # exact count for one semantic block

    def __post_init__(self):
        problems = []
        if not 0 < self.sr <= 1:
            problems.append(f"payload sr must be in (0, 1], got {self.sr}")
        if not 1 <= self.gamma_bits <= 16:
            problems.append(f"payload gamma_bits must be in 1..16, got {self.gamma_bits}")
        if not 0 <= self.n_blocks <= 16:
            problems.append(f"payload n_blocks must be in 0..16, got {self.n_blocks}")
        if problems:
            raise ConfigError(problems)


def payload_bits(spec: PayloadSpec, exact: bool = False) -> float:
    """Bits on the air for N^a selected blocks.

    Idealized form: gamma * (H/4) * (W/4) * 3 * sr * N^a. Exact form counts
    the ceil-rounded measurements actually packed per semantic block.
    """
    if exact:
        if spec.measurements_per_block is None:
            raise ConfigError("exact payload accounting needs measurements_per_block")
        return float(spec.gamma_bits * spec.measurements_per_block * spec.n_blocks)
    per_block = spec.gamma_bits * (spec.height / 4.0) * (spec.width / 4.0) * 3.0 * spec.sr
    return per_block * spec.n_blocks


def payload_bits_for(profile: ChannelProfile, height: int, width: int, n_blocks: int) -> float:
    return payload_bits(PayloadSpec(profile.gamma_bits, profile.sr, height, width, n_blocks))


def latency(bits: float, rate_bps: float) -> float:
    """Uplink latency in seconds: transmitted bits over the slot rate."""
    if rate_bps <= 0:
        raise ChannelError(f"rate must be positive, got {rate_bps}")
    return bits / rate_bps


def rate_table(profile: ChannelProfile) -> list[float]:
    """Rates (bits/s) for every quantized gain level."""
    return [uplink_rate(g, profile) for g in profile.gain_levels_db]
