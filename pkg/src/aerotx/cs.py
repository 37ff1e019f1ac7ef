"""Block-wise learned compressive sensing codec.

Sampling is a stride-k linear kernel applied per k-by-k-by-3 sub-block;
measurements of non-selected semantic blocks are zeroed; reconstruction is
an initial transposed-kernel estimate refined by L residual/denoise stages.
No layer in this path carries a bias (zeroed measurements must map to
exactly zero contributions).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, NumericalError, PartitionError, TrainingError
from .imaging import SEMANTIC_GRID, N_BLOCKS


def measurement_count(k: int, sr: float) -> int:
    return math.ceil(k * k * 3 * sr)


@dataclass(frozen=True)
class CsConfig:
    k: int = 8
    sr: float = 0.3
    stages: int = 3
    gamma_bits: int = 8
    channels: int = 16        # feature maps inside the residual/denoise nets

    def __post_init__(self):
        problems = []
        if self.k < 1:
            problems.append(f"cs.k must be positive, got {self.k}")
        if not 0 < self.sr <= 1:
            problems.append(f"cs.sr must be in (0, 1], got {self.sr}")
        if not 1 <= self.stages <= 8:
            problems.append(f"cs.stages must be in 1..8, got {self.stages}")
        if not 1 <= self.gamma_bits <= 16:
            problems.append(f"cs.gamma_bits must be in 1..16, got {self.gamma_bits}")
        if problems:
            raise ConfigError(problems)

    @property
    def m(self) -> int:
        return measurement_count(self.k, self.sr)

    @property
    def n(self) -> int:
        return 3 * self.k * self.k

    def check_image(self, height: int, width: int):
        edge = height // SEMANTIC_GRID
        problems = []
        if height % SEMANTIC_GRID or width % SEMANTIC_GRID:
            problems.append(f"image extents {(height, width)} not divisible by {SEMANTIC_GRID}")
        elif edge % self.k or (width // SEMANTIC_GRID) % self.k:
            problems.append(f"k must divide H/4={edge} (sub-blocks may not straddle semantic blocks)")
        if problems:
            raise ConfigError(problems)


def pseudo_inverse_matrix(phi: np.ndarray, cond_limit: float = 1e10) -> np.ndarray:
    """Moore-Penrose right inverse phi^T (phi phi^T)^-1, float64 solve.

    Satisfies phi @ pinv = I_m; raises on (near) rank deficiency with the
    offending condition number.
    """
    p64 = phi.astype(np.float64)
    gram = p64 @ p64.T
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > cond_limit:
        raise NumericalError(f"sampling matrix is rank deficient (gram condition number {cond:.3e})")
    return np.linalg.solve(gram, p64).T


class SamplingKernel:
    """Learned sampling kernel kappa plus its flat matrix and pseudo-inverse."""

    def __init__(self, kernel: np.ndarray):
        k, k2, c, m = kernel.shape
        if k != k2 or c != 3:
            raise ConfigError(f"sampling kernel must be (k, k, 3, m), got {kernel.shape}")
        self.kernel = np.ascontiguousarray(kernel, dtype=np.float32)
        self.k = k
        self.m = m
        self.n = k * k * 3
        self.phi = np.ascontiguousarray(self.kernel.reshape(self.n, m).T)
        self.phi_pinv = pseudo_inverse_matrix(self.phi).astype(np.float32)
        err = np.max(np.abs(self.phi.astype(np.float64) @ self.phi_pinv.astype(np.float64) - np.eye(m)))
        if err > 1e-5:
            raise NumericalError(f"pseudo-inverse check failed: max |phi phi+ - I| = {err:.3e}")

    @property
    def inverse_kernel(self) -> np.ndarray:
        """Pseudo-inverse in transposed-kernel layout (k, k, m, 3)."""
        return np.ascontiguousarray(
            self.phi_pinv.reshape(self.k, self.k, 3, self.m).transpose(0, 1, 3, 2))

    @classmethod
    def random(cls, k: int, sr: float, rng: np.random.Generator) -> "SamplingKernel":
        n = 3 * k * k
        m = measurement_count(k, sr)
        kernel = rng.normal(0.0, 1.0 / math.sqrt(n), size=(k, k, 3, m)).astype(np.float32)
        return cls(kernel)

    @classmethod
    def identity(cls, k: int) -> "SamplingKernel":
        n = 3 * k * k
        return cls(np.eye(n, dtype=np.float32).reshape(k, k, 3, n))


def mask_grid(mask: np.ndarray, gh: int, gw: int) -> np.ndarray:
    """Expand a 16-entry semantic mask onto the (gh, gw) sub-block grid."""
    if gh % SEMANTIC_GRID or gw % SEMANTIC_GRID:
        raise PartitionError(f"sub-block grid {(gh, gw)} not divisible by {SEMANTIC_GRID}")
    m = np.asarray(mask, dtype=np.float32).reshape(SEMANTIC_GRID, SEMANTIC_GRID)
    return np.repeat(np.repeat(m, gh // SEMANTIC_GRID, axis=0), gw // SEMANTIC_GRID, axis=1)


@dataclass
class Measurements:
    """Compressed-domain grid of m-vectors, one per k-by-k sub-block."""
    data: np.ndarray                 # (Gh, Gw, m) float32
    mask: np.ndarray | None = None   # semantic action applied, if any

    @property
    def grid_shape(self):
        return self.data.shape[:2]


def compress(img: np.ndarray, kernel: SamplingKernel,
             mask: np.ndarray | None = None) -> Measurements:
    """Per-sub-block measurements y_i = phi x_i, zeroed outside the mask."""
    h, w, _ = img.shape
    if h % kernel.k or w % kernel.k:
        raise PartitionError(f"sub-block size {kernel.k} does not divide image extents {(h, w)}")
    fwd = nn.block_linear(nn.constant(img), nn.constant(kernel.kernel)).data
    if mask is not None:
        fwd = fwd * mask_grid(mask, fwd.shape[0], fwd.shape[1])[:, :, None]
    return Measurements(np.ascontiguousarray(fwd), None if mask is None else np.asarray(mask))


def compress_batch(images: np.ndarray, kernel: SamplingKernel) -> np.ndarray:
    """Unmasked measurement grids for a batch of images, (B, Gh, Gw, m)."""
    return nn.block_linear(nn.constant(images), nn.constant(kernel.kernel)).data


def apply_mask(meas: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the sub-block measurements of unselected semantic blocks.

    meas may be (Gh, Gw, m) with one mask or (B, Gh, Gw, m) with (B, 16) masks.
    """
    gh, gw = meas.shape[-3:-1]
    mask = np.asarray(mask)
    if meas.ndim == 4 and mask.ndim == 2:
        grids = np.stack([mask_grid(row, gh, gw) for row in mask])
        return meas * grids[:, :, :, None]
    return meas * mask_grid(mask, gh, gw)[..., None]


# --- uniform midtread quantizer -------------------------------------------
#
# Symmetric per-dimension ranges [-R_d, R_d]; step R_d / (2^(gamma-1) - 1) so
# zero sits exactly on the grid and masked zeros survive the round trip.
# Stored code = level + 2^(gamma-1); np.round (ties to even) is used, so the
# mapping is deterministic.

@dataclass(frozen=True)
class QuantRanges:
    half_width: np.ndarray   # (m,) positive float32

    @classmethod
    def calibrate(cls, samples: np.ndarray, sigmas: float = 4.0) -> "QuantRanges":
        """Per-dimension |mean| + sigmas * stddev over calibration measurements."""
        flat = samples.reshape(-1, samples.shape[-1]).astype(np.float64)
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        hw = np.abs(mean) + sigmas * std
        hw = np.maximum(hw, 1e-6)
        return cls(hw.astype(np.float32))

    @classmethod
    def fixed(cls, half_width: float, m: int) -> "QuantRanges":
        return cls(np.full(m, half_width, dtype=np.float32))


def quant_step(ranges: QuantRanges, gamma_bits: int) -> np.ndarray:
    return ranges.half_width.astype(np.float64) / (2 ** (gamma_bits - 1) - 1)


def quantize(values: np.ndarray, gamma_bits: int, ranges: QuantRanges):
    """Quantize (..., m) measurements to integer codes.

    Returns (codes (... , m) uint16, clipped_count). Values outside the
    calibrated range are clamped and counted.
    """
    half = 2 ** (gamma_bits - 1)
    step = quant_step(ranges, gamma_bits)
    raw = np.round(values.astype(np.float64) / step)
    clipped = np.clip(raw, -(half - 1), half - 1)
    n_clipped = int(np.count_nonzero(raw != clipped))
    codes = (clipped + half).astype(np.uint16)
    return codes, n_clipped


def dequantize(codes: np.ndarray, gamma_bits: int, ranges: QuantRanges) -> np.ndarray:
    half = 2 ** (gamma_bits - 1)
    step = quant_step(ranges, gamma_bits)
    return ((codes.astype(np.float64) - half) * step).astype(np.float32)


def quantize_roundtrip(values: np.ndarray, gamma_bits: int, ranges: QuantRanges) -> np.ndarray:
    codes, _ = quantize(values, gamma_bits, ranges)
    return dequantize(codes, gamma_bits, ranges)


def pack_codes(codes: np.ndarray, gamma_bits: int) -> bytes:
    """Pack codes LSB-first into a little-endian bitstream."""
    flat = codes.reshape(-1).astype(np.uint16)
    bits = ((flat[:, None] >> np.arange(gamma_bits, dtype=np.uint16)) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_codes(payload: bytes, gamma_bits: int, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    bits = bits[:count * gamma_bits].reshape(count, gamma_bits).astype(np.uint16)
    return (bits << np.arange(gamma_bits, dtype=np.uint16)).sum(axis=1, dtype=np.uint16)


def mask_to_int(mask: np.ndarray) -> int:
    return int(sum(int(b) << i for i, b in enumerate(np.asarray(mask).reshape(-1))))


def int_to_mask(value: int) -> np.ndarray:
    return np.array([(value >> i) & 1 for i in range(N_BLOCKS)], dtype=np.uint8)


def encode_payload(meas: Measurements, gamma_bits: int, ranges: QuantRanges,
                   gain_index: int) -> bytes:
    """Wire format: u16 semantic mask, u8 gain index, then the gamma-bit
    packed codes of the selected blocks' sub-blocks in row-major order."""
    mask = meas.mask if meas.mask is not None else np.ones(N_BLOCKS, dtype=np.uint8)
    gh, gw = meas.grid_shape
    grid = mask_grid(mask, gh, gw) > 0
    codes, _ = quantize(meas.data[grid], gamma_bits, ranges)
    header = int(mask_to_int(mask)).to_bytes(2, "little") + bytes([gain_index])
    return header + pack_codes(codes, gamma_bits)


def decode_payload(payload: bytes, gamma_bits: int, ranges: QuantRanges,
                   grid_shape: tuple[int, int]):
    """Inverse of encode_payload: (Measurements with zeros outside the mask,
    gain index)."""
    mask = int_to_mask(int.from_bytes(payload[:2], "little"))
    gain_index = payload[2]
    gh, gw = grid_shape
    grid = mask_grid(mask, gh, gw) > 0
    m = len(ranges.half_width)
    count = int(np.count_nonzero(grid)) * m
    codes = unpack_codes(payload[3:], gamma_bits, count)
    data = np.zeros((gh, gw, m), dtype=np.float32)
    if count:
        data[grid] = dequantize(codes.reshape(-1, m), gamma_bits, ranges)
    return Measurements(data, mask), gain_index


# --- reconstruction ---------------------------------------------------------

def _conv_param_shapes(channels: int):
    return {
        "res/w0": (3, 3, 3, channels),
        "res/w1": (3, 3, channels, 3),
        "den/w0": (3, 3, 3, channels),
        "den/w1": (3, 3, channels, channels),
        "den/w2": (3, 3, channels, 3),
    }


class ReconModel:
    """Initial transposed-kernel estimate plus L residual/denoise stages.

    The initial estimate goes through init_kernel (the trained auxiliary
    kappa' when available, the analytic pseudo-inverse otherwise); the
    per-stage residual mapping always uses the pseudo-inverse. Stage l:
    E = pinv x (Y - kappa x X_hat), Z = E + f_res(Z_prev),
    X_hat = f_den(X_hat + Z). All convolutions are 3x3, bias-free.
    """

    def __init__(self, cfg: CsConfig, kernel: SamplingKernel,
                 params: nn.ParamSet | None = None, seed: int = 0,
                 init_kernel: np.ndarray | None = None):
        self.cfg = cfg
        self.kernel = kernel
        self.init_kernel = None if init_kernel is None else np.ascontiguousarray(init_kernel, dtype=np.float32)
        if params is None:
            params = nn.ParamSet()
            rng = np.random.default_rng([seed, 0xC5])
            for l in range(cfg.stages):
                for name, shape in _conv_param_shapes(cfg.channels).items():
                    fan_in = shape[0] * shape[1] * shape[2]
                    fan_out = shape[0] * shape[1] * shape[3]
                    params.add(f"stage{l}/{name}", nn.uniform_init(rng, shape, fan_in, fan_out))
        self.params = params

    def _res_net(self, z, l):
        h = nn.relu(nn.conv2d(z, self.params[f"stage{l}/res/w0"]))
        return nn.conv2d(h, self.params[f"stage{l}/res/w1"])

    def _den_net(self, x, l):
        h = nn.relu(nn.conv2d(x, self.params[f"stage{l}/den/w0"]))
        h = nn.relu(nn.conv2d(h, self.params[f"stage{l}/den/w1"]))
        return nn.conv2d(h, self.params[f"stage{l}/den/w2"])

    def initial_tensor(self, y: nn.Tensor) -> nn.Tensor:
        kinit = self.init_kernel if self.init_kernel is not None else self.kernel.inverse_kernel
        return nn.block_linear_t(y, nn.constant(kinit))

    def forward_tensor(self, y: nn.Tensor, stages: int | None = None):
        """Tape forward through the stages; returns (x_hat, per-stage residual norms)."""
        stages = self.cfg.stages if stages is None else stages
        kappa_c = nn.constant(self.kernel.kernel)
        kinv_c = nn.constant(self.kernel.inverse_kernel)
        x_hat = self.initial_tensor(y)
        z = nn.constant(np.zeros_like(x_hat.data))
        resid_norms = []
        for l in range(stages):
            r = nn.sub(y, nn.block_linear(x_hat, kappa_c))
            resid_norms.append(float(np.sqrt(np.sum(r.data.astype(np.float64) ** 2))))
            e = nn.block_linear_t(r, kinv_c)
            z = nn.add(e, self._res_net(z, l))
            x_hat = self._den_net(nn.add(x_hat, z), l)
        return x_hat, resid_norms


@dataclass
class ReconResult:
    x_hat: np.ndarray
    residual_norms: list[float]
    stage_mse: list[float] | None = None


def initial_recon(meas: Measurements, kernel: SamplingKernel,
                  inverse_kernel: np.ndarray | None = None) -> np.ndarray:
    """One-shot estimate through the transposed kernel (analytic pinv by default)."""
    kinv = kernel.inverse_kernel if inverse_kernel is None else inverse_kernel
    return nn.block_linear_t(nn.constant(meas.data), nn.constant(kinv)).data


def reconstruct(meas: Measurements, model: ReconModel, stages: int | None = None,
                reference: np.ndarray | None = None) -> ReconResult:
    """Run the staged reconstruction on one measurement grid."""
    x_hat, norms, mses = _reconstruct_arrays(meas.data[None], model, stages,
                                             None if reference is None else reference[None])
    if not np.all(np.isfinite(x_hat)):
        raise NumericalError(f"non-finite activation in reconstruction stage {len(norms)}")
    return ReconResult(x_hat[0], norms, mses)


def reconstruct_batch(meas_batch: np.ndarray, model: ReconModel,
                      stages: int | None = None) -> np.ndarray:
    x_hat, _, _ = _reconstruct_arrays(meas_batch, model, stages, None)
    return x_hat


def _reconstruct_arrays(meas_batch: np.ndarray, model: ReconModel,
                        stages: int | None, references: np.ndarray | None):
    stages = model.cfg.stages if stages is None else stages
    y = nn.constant(meas_batch)
    if stages == 0:
        x0 = model.initial_tensor(y).data
        mse = None if references is None else [float(np.mean((x0.astype(np.float64) - references) ** 2))]
        return x0, [], mse
    x_hat, norms = model.forward_tensor(y, stages)
    mses = None
    if references is not None:
        mses = [float(np.mean((x_hat.data.astype(np.float64) - references) ** 2))]
    return x_hat.data, norms, mses


def mean_pixel_mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))


# --- training ---------------------------------------------------------------

@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)

    @property
    def final(self) -> float | None:
        return self.losses[-1] if self.losses else None


def _check_loss(value: float, what: str):
    if not np.isfinite(value):
        raise TrainingError(f"{what} loss diverged (non-finite)")


def pretrain_kernel(images: np.ndarray, cfg: CsConfig, steps: int = 300,
                    batch: int = 16, lr: float = 1e-3, seed: int = 0,
                    init: str = "random"):
    """Jointly fit the sampling kernel and its auxiliary transposed kernel by
    minimizing full-image MSE of the one-shot round trip.

    Returns (SamplingKernel, kappa_prime array (k,k,m,3), TrainLog).
    """
    cfg.check_image(images.shape[1], images.shape[2])
    rng = np.random.default_rng([seed, 0xCA])
    params = nn.ParamSet()
    k, m, n = cfg.k, cfg.m, cfg.n
    if init == "identity":
        if m != n:
            raise ConfigError("identity init requires sr = 1 (m = 3k^2)")
        kappa0 = np.eye(n, dtype=np.float32).reshape(k, k, 3, n)
        kprime0 = np.eye(n, dtype=np.float32).reshape(k, k, 3, n).transpose(0, 1, 3, 2)
    else:
        kappa0 = rng.normal(0.0, 1.0 / math.sqrt(n), size=(k, k, 3, m)).astype(np.float32)
        kprime0 = rng.normal(0.0, 1.0 / math.sqrt(m), size=(k, k, m, 3)).astype(np.float32)
    kappa = params.add("kappa", kappa0)
    kprime = params.add("kappa_prime", kprime0)
    log = TrainLog()
    n_img = len(images)
    for step in range(steps):
        idx = rng.integers(0, n_img, size=min(batch, n_img))
        x = nn.constant(images[idx])
        params.zero_grad()
        y = nn.block_linear(x, kappa)
        x0 = nn.block_linear_t(y, kprime)
        loss = nn.mse_loss(x0, x)
        _check_loss(float(loss.data), "kernel pretraining")
        loss.backward()
        params.adam_step(lr)
        log.losses.append(float(loss.data))
    return SamplingKernel(kappa.data.copy()), kprime.data.copy(), log


def train_stages(images: np.ndarray, kernel: SamplingKernel, cfg: CsConfig,
                 steps: int = 300, batch: int = 8, lr: float = 1e-3, seed: int = 0,
                 model: ReconModel | None = None, mask_sampler=None,
                 init_kernel: np.ndarray | None = None) -> tuple[ReconModel, TrainLog]:
    """Optimize the stage networks end to end against full-image MSE.

    The kernel stays fixed. mask_sampler, when given, is called with
    (rng, image_indices) and must return per-image semantic masks; the
    measurements are zeroed accordingly before reconstruction (used by the
    policy-driven finetune phase).
    """
    cfg.check_image(images.shape[1], images.shape[2])
    rng = np.random.default_rng([seed, 0x57])
    if model is None:
        model = ReconModel(cfg, kernel, seed=seed, init_kernel=init_kernel)
    log = TrainLog()
    n_img = len(images)
    gh, gw = images.shape[1] // cfg.k, images.shape[2] // cfg.k
    meas_all = None
    if n_img * gh * gw * cfg.m < 50_000_000:
        meas_all = compress_batch(images, kernel)   # measurements are mask-independent
    for step in range(steps):
        idx = rng.integers(0, n_img, size=min(batch, n_img))
        y_np = meas_all[idx] if meas_all is not None else compress_batch(images[idx], kernel)
        if mask_sampler is not None:
            masks = mask_sampler(rng, idx)
            y_np = apply_mask(y_np, np.asarray(masks))
        x_ref = nn.constant(images[idx])
        model.params.zero_grad()
        x_hat, _ = model.forward_tensor(nn.constant(y_np))
        loss = nn.mse_loss(x_hat, x_ref)
        _check_loss(float(loss.data), "stage training")
        loss.backward()
        model.params.adam_step(lr)
        log.losses.append(float(loss.data))
    return model, log
