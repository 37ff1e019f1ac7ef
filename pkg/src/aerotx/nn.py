"""Minimal numpy computation substrate with reverse-mode gradients.

Values are float32 arrays; genuine reductions (sums, means, losses,
pooling) accumulate in float64 before casting back, while matrix products
use the BLAS float32 path, which is bit-reproducible for fixed shapes and
thread counts. Only the fixed set of operations used by the toolkit is
supported (dense maps, strided/block convolutions and their transposes,
elementwise nonlinearities, pooling, the two losses).
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, NumericalError, TrainingError

DTYPE = np.float32

__all__ = [
    "Tensor",
    "ParamSet",
    "constant",
    "dense",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "clip",
    "log",
    "conv2d",
    "avg_pool2",
    "global_avg_pool",
    "block_linear",
    "block_linear_t",
    "sum_all",
    "mean_all",
    "mse_loss",
    "softmax_cross_entropy",
    "bernoulli_log_prob",
    "softmax",
    "uniform_init",
    "optimizer_step",
    "grad_check",
    "save_tensors",
    "load_tensors",
]


_COMPUTE = {"dtype": DTYPE}


def _dt():
    return _COMPUTE["dtype"]


@contextmanager
def float64_compute():
    """Run forward/backward math in float64 (used by grad_check)."""
    prev = _COMPUTE["dtype"]
    _COMPUTE["dtype"] = np.float64
    try:
        yield
    finally:
        _COMPUTE["dtype"] = prev


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE, order="C")


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product in the active compute dtype (deterministic BLAS path)."""
    dt = _dt()
    if dt is np.float64:
        return np.matmul(a.astype(dt, copy=False), b.astype(dt, copy=False))
    return np.matmul(a, b)


def _sum64(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    return x.sum(axis=axis, dtype=np.float64, keepdims=keepdims)


class Tensor:
    """A float32 array plus the closure that backpropagates into parents.

    Scalar reduction outputs keep float64 data so loss differences stay
    meaningful in finite-difference checks.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, parents=(), bwd=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self):
        if self.data.ndim != 0:
            raise DimensionError("backward() starts from a scalar")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bwd is not None:
                node._bwd(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(x) -> Tensor:
    """Wrap an array as a non-trainable leaf."""
    return Tensor(_f32(x))


def _make(data, parents, bwd) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, parents=parents if rg else (), bwd=bwd if rg else None)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = _sum64(g, axis=0).astype(_dt())
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = _sum64(g, axis=ax, keepdims=True).astype(_dt())
    return g


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = constant(np.asarray(b, dtype=DTYPE))
    data = (a.data + b.data).astype(_dt(), copy=False)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = constant(np.asarray(a, dtype=DTYPE))
    if not isinstance(b, Tensor):
        b = constant(np.asarray(b, dtype=DTYPE))
    data = (a.data - b.data).astype(_dt(), copy=False)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = constant(np.asarray(b, dtype=DTYPE))
    data = (a.data * b.data).astype(_dt(), copy=False)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast((g * b.data).astype(_dt(), copy=False), a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast((g * a.data).astype(_dt(), copy=False), b.data.shape))

    return _make(data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"inner extents differ: {a.data.shape} @ {b.data.shape}")
    data = _mm(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_mm(g, b.data.T))
        if b.requires_grad:
            b.accumulate(_mm(a.data.T, g))

    return _make(data, (a, b), bwd)


def dense(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w (+ bias)``; strictly linear when bias is None."""
    out = matmul(x, w)
    if bias is not None:
        if bias.data.shape != (w.data.shape[1],):
            raise DimensionError(f"bias shape {bias.data.shape} does not match width {w.data.shape[1]}")
        out = add(out, bias)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, x.data.dtype.type(0))

    def bwd(g):
        x.accumulate(np.where(mask, g, g.dtype.type(0)))

    return _make(data, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    data = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z)))).astype(_dt())

    def bwd(g):
        x.accumulate((g * data * (1.0 - data)).astype(_dt(), copy=False))

    return _make(data, (x,), bwd)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(x.data, x.data.dtype.type(lo), x.data.dtype.type(hi))
    interior = (x.data > lo) & (x.data < hi)

    def bwd(g):
        x.accumulate(np.where(interior, g, g.dtype.type(0)))

    return _make(data, (x,), bwd)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def bwd(g):
        x.accumulate((g / x.data).astype(_dt(), copy=False))

    return _make(data, (x,), bwd)


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def _shift_slice(xp: np.ndarray, di: int, dj: int, oh: int, ow: int, stride: int) -> np.ndarray:
    s = xp[:, di:di + (oh - 1) * stride + 1:stride, dj:dj + (ow - 1) * stride + 1:stride, :]
    return np.ascontiguousarray(s).reshape(-1, xp.shape[3])


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """2-D convolution, channels-last, zero 'same' padding, square stride.

    x: (B, H, W, Cin), w: (kh, kw, Cin, Cout) -> (B, ceil(H/s), ceil(W/s), Cout).
    Computed as one shifted-slice matrix product per kernel tap; the slices
    are recomputed in backward rather than cached.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects x (B,H,W,C) and w (kh,kw,Cin,Cout)")
    b, h, wid, cin = x.data.shape
    kh, kw, wcin, cout = w.data.shape
    if wcin != cin:
        raise DimensionError(f"kernel input channels {wcin} != image channels {cin}")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (wid + 2 * pw - kw) // stride + 1
    xp = _pad_hw(x.data, ph, pw)
    if _dt() is np.float64:
        out = np.zeros((b * oh * ow, cout), dtype=np.float64)
        for di in range(kh):
            for dj in range(kw):
                out += _mm(_shift_slice(xp, di, dj, oh, ow, stride), w.data[di, dj])
    else:
        out = np.zeros((b * oh * ow, cout), dtype=xp.dtype)
        buf = np.empty_like(out)
        for di in range(kh):
            for dj in range(kw):
                np.matmul(_shift_slice(xp, di, dj, oh, ow, stride), w.data[di, dj], out=buf)
                out += buf
    data = out.reshape(b, oh, ow, cout)

    def bwd(g):
        gf = g.reshape(b * oh * ow, cout)
        if w.requires_grad:
            dw = np.empty_like(w.data)
            for di in range(kh):
                for dj in range(kw):
                    dw[di, dj] = _mm(_shift_slice(xp, di, dj, oh, ow, stride).T, gf)
            w.accumulate(dw)
        if x.requires_grad:
            dxp = np.zeros(xp.shape[:3] + (cin,), dtype=gf.dtype)
            for di in range(kh):
                for dj in range(kw):
                    contrib = _mm(gf, w.data[di, dj].T).reshape(b, oh, ow, cin)
                    dxp[:, di:di + (oh - 1) * stride + 1:stride,
                        dj:dj + (ow - 1) * stride + 1:stride, :] += contrib
            if ph or pw:
                dxp = dxp[:, ph:ph + h, pw:pw + wid, :]
            x.accumulate(dxp)

    return _make(data, (x, w), bwd)


def avg_pool2(x: Tensor) -> Tensor:
    b, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even extents, got {(h, w)}")
    data = (x.data.reshape(b, h // 2, 2, w // 2, 2, c)
            .mean(axis=(2, 4), dtype=np.float64).astype(_dt()))

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * g.dtype.type(0.25)
        x.accumulate(gx)

    return _make(data, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    b, h, w, c = x.data.shape
    data = x.data.mean(axis=(1, 2), dtype=np.float64).astype(_dt())

    def bwd(g):
        gx = np.broadcast_to(g[:, None, None, :] / g.dtype.type(h * w), x.data.shape)
        x.accumulate(gx.astype(g.dtype, copy=False))

    return _make(data, (x,), bwd)


def _tile_split(x: np.ndarray, k: int):
    b, h, w, c = x.shape
    gh, gw = h // k, w // k
    tiles = x.reshape(b, gh, k, gw, k, c).transpose(0, 1, 3, 2, 4, 5)
    return tiles.reshape(b * gh * gw, k * k * c), gh, gw


def _tile_join(flat: np.ndarray, b: int, gh: int, gw: int, k: int, c: int) -> np.ndarray:
    tiles = flat.reshape(b, gh, gw, k, k, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(tiles.reshape(b, gh * k, gw * k, c))


def _check_divisible(h, w, k):
    if h % k or w % k:
        from .errors import PartitionError
        raise PartitionError(f"block size {k} does not divide image extents {(h, w)}")


def block_linear(x: Tensor, kernel: Tensor) -> Tensor:
    """Map every k-by-k tile through the same linear kernel (stride-k conv).

    x: (B, H, W, C) or (H, W, C); kernel: (k, k, C, m). Each tile is
    flattened row-major (k, k, C) and multiplied by the (3k^2, m) matrix the
    kernel reshapes to. No bias.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    k, k2, c, m = kernel.data.shape
    if k != k2:
        raise DimensionError(f"kernel tile must be square, got {kernel.data.shape}")
    b, h, w, xc = xd.shape
    if xc != c:
        raise DimensionError(f"kernel channels {c} != image channels {xc}")
    _check_divisible(h, w, k)
    flat, gh, gw = _tile_split(xd, k)
    kf = kernel.data.reshape(k * k * c, m)
    out = _mm(flat, kf).reshape(b, gh, gw, m)
    data = out[0] if squeeze else out

    def bwd(g):
        gf = (g[None] if squeeze else g).reshape(b * gh * gw, m)
        if kernel.requires_grad:
            kernel.accumulate(_mm(flat.T, gf).reshape(kernel.data.shape))
        if x.requires_grad:
            dflat = _mm(gf, kf.T)
            dx = _tile_join(dflat, b, gh, gw, k, c)
            x.accumulate(dx[0] if squeeze else dx)

    return _make(data, (x, kernel), bwd)


def block_linear_t(y: Tensor, kernel: Tensor) -> Tensor:
    """Inverse tiling of block_linear (stride-k transposed conv).

    y: (B, Gh, Gw, m) or (Gh, Gw, m); kernel: (k, k, m, C). Each m-vector
    becomes one k-by-k-by-C tile. No bias.
    """
    squeeze = y.data.ndim == 3
    yd = y.data[None] if squeeze else y.data
    k, k2, m, c = kernel.data.shape
    if k != k2:
        raise DimensionError(f"kernel tile must be square, got {kernel.data.shape}")
    b, gh, gw, ym = yd.shape
    if ym != m:
        raise DimensionError(f"kernel measurement count {m} != input channels {ym}")
    # rows indexed row-major (k, k, C) to mirror block_linear's flatten order
    kf = kernel.data.transpose(0, 1, 3, 2).reshape(k * k * c, m)
    flat = _mm(yd.reshape(b * gh * gw, m), kf.T)
    out = _tile_join(flat, b, gh, gw, k, c)
    data = out[0] if squeeze else out

    def bwd(g):
        gd = g[None] if squeeze else g
        gflat, _, _ = _tile_split(gd, k)
        if kernel.requires_grad:
            dkf = _mm(gflat.T, yd.reshape(b * gh * gw, m))
            kernel.accumulate(dkf.reshape(k, k, c, m).transpose(0, 1, 3, 2))
        if y.requires_grad:
            dy = _mm(gflat, kf).reshape(b, gh, gw, m)
            y.accumulate(dy[0] if squeeze else dy)

    return _make(data, (y, kernel), bwd)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(_sum64(x.data))

    def bwd(g):
        x.accumulate(np.full(x.data.shape, _dt()(g), dtype=_dt()))

    return _make(data, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(_sum64(x.data) / n)

    def bwd(g):
        x.accumulate(np.full(x.data.shape, _dt()(g / n), dtype=_dt()))

    return _make(data, (x,), bwd)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Half mean squared error (the 1/2 cancels the square's derivative)."""
    if pred.data.shape != target.data.shape:
        raise DimensionError(f"shape mismatch {pred.data.shape} vs {target.data.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    n = diff.size
    data = np.asarray(0.5 * np.sum(diff * diff) / n)

    def bwd(g):
        scale = float(g) / n
        gp = (diff * scale).astype(_dt())
        if pred.requires_grad:
            pred.accumulate(gp)
        if target.requires_grad:
            target.accumulate(-gp)

    return _make(data, (pred, target), bwd)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax (plain numpy helper, float64 accumulation)."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(DTYPE)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of integer labels under softmax(logits)."""
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    b = z.shape[0]
    data = np.asarray((lse - z[np.arange(b), labels]).sum() / b)
    probs = np.exp(z - lse[:, None])

    def bwd(g):
        gz = probs.copy()
        gz[np.arange(b), labels] -= 1.0
        logits.accumulate((gz * (float(g) / b)).astype(_dt()))

    return _make(data, (logits,), bwd)


def bernoulli_log_prob(p: Tensor, actions: np.ndarray) -> Tensor:
    """Per-row log probability of binary actions under independent Bernoullis.

    p: (B, n) probabilities in (0, 1); actions: (B, n) of {0, 1}.
    Returns a (B,) tensor.
    """
    a = actions.astype(np.float64)
    pd = p.data.astype(np.float64)
    data = (a * np.log(pd) + (1.0 - a) * np.log1p(-pd)).sum(axis=1).astype(_dt())

    def bwd(g):
        dp = g[:, None].astype(np.float64) * (a / pd - (1.0 - a) / (1.0 - pd))
        p.accumulate(dp.astype(_dt()))

    return _make(data, (p,), bwd)


def bernoulli_log_prob_from_logits(z: Tensor, actions: np.ndarray) -> Tensor:
    """log pi(a) computed from pre-sigmoid logits: numerically exact and the
    gradient (a - sigmoid(z)) never vanishes from probability clamping."""
    a = actions.astype(np.float64)
    zd = z.data.astype(np.float64)
    # a*log p + (1-a)*log(1-p) = -softplus(-z)*a - softplus(z)*(1-a)
    sp = np.logaddexp(0.0, zd)      # softplus(z)
    spm = np.logaddexp(0.0, -zd)    # softplus(-z)
    data = (-(a * spm + (1.0 - a) * sp)).sum(axis=1).astype(_dt())
    pd = np.where(zd >= 0, 1.0 / (1.0 + np.exp(-np.abs(zd))),
                  np.exp(-np.abs(zd)) / (1.0 + np.exp(-np.abs(zd))))

    def bwd(g):
        dz = g[:, None].astype(np.float64) * (a - pd)
        z.accumulate(dz.astype(_dt()))

    return _make(data, (z,), bwd)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    """Seeded uniform init in +/- sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class ParamSet:
    """Named trainable tensors plus per-parameter optimizer moments."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}
        self.step_count = 0

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(_f32(np.array(data, copy=True)), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: t.grad for n, t in self._params.items() if t.grad is not None}

    def _check_grad(self, name: str, g: np.ndarray, shape):
        if g.shape != shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")

    def sgd_step(self, lr: float, trainable=None):
        """Plain first-order update p <- p - lr * g."""
        for name, t in self._params.items():
            if trainable is not None and name not in trainable:
                continue
            if t.grad is None:
                continue
            self._check_grad(name, t.grad, t.data.shape)
            t.data -= DTYPE(lr) * t.grad
        self.step_count += 1

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8, trainable=None):
        """Adaptive first-order update with bias correction."""
        for name, t in self._params.items():
            if trainable is not None and name not in trainable:
                continue
            if t.grad is None:
                continue
            g = t.grad
            self._check_grad(name, g, t.data.shape)
            if name not in self._m:
                self._m[name] = np.zeros_like(t.data)
                self._v[name] = np.zeros_like(t.data)
                self._t[name] = 0
            self._t[name] += 1
            k = self._t[name]
            m = self._m[name]
            v = self._v[name]
            m += (1.0 - beta1) * (g - m)
            v += (1.0 - beta2) * (g * g - v)
            mhat = m / (1.0 - beta1 ** k)
            vhat = v / (1.0 - beta2 ** k)
            t.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(DTYPE)
        self.step_count += 1

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, arr in arrays.items():
            if name in self._params:
                t = self._params[name]
                if t.data.shape != arr.shape:
                    raise DimensionError(f"loaded shape {arr.shape} != expected {t.data.shape} for {name!r}")
                t.data = _f32(np.array(arr, copy=True))
            else:
                self.add(name, arr)

    def save(self, path):
        save_tensors(path, {n: t.data for n, t in self._params.items()})

    def load(self, path):
        self.load_arrays(load_tensors(path))


def optimizer_step(params: ParamSet, lr: float, method: str = "adam", trainable=None):
    """Apply one optimizer update to every parameter carrying a gradient."""
    if method == "adam":
        params.adam_step(lr, trainable=trainable)
    elif method == "sgd":
        params.sgd_step(lr, trainable=trainable)
    else:
        raise ValueError(f"unknown optimizer method {method!r}")


def grad_check(f, params, step: float = 1e-3, rng: np.random.Generator | None = None,
               max_checks_per_param: int | None = None) -> float:
    """Compare analytic gradients of a scalar-valued f() against central differences.

    params is a dict name -> Tensor (or a ParamSet). The function is
    evaluated in float64 compute mode so the comparison measures the
    derivative formulas, not float32 forward noise. Returns the maximum
    relative error over all checked elements; elements where both gradients
    are below 1e-7 count as zero error.
    """
    tensors = dict(params.items())
    with float64_compute():
        for t in tensors.values():
            t.grad = None
        loss = f()
        loss.backward()
        analytic = {}
        for name, t in tensors.items():
            analytic[name] = np.zeros_like(t.data, dtype=np.float64) if t.grad is None else np.asarray(t.grad, dtype=np.float64).copy()

        worst = 0.0
        for name, t in tensors.items():
            flat = t.data.reshape(-1)
            idxs = np.arange(flat.size)
            if max_checks_per_param is not None and flat.size > max_checks_per_param:
                if rng is None:
                    rng = np.random.default_rng(0)
                idxs = rng.choice(flat.size, size=max_checks_per_param, replace=False)
            an = analytic[name].reshape(-1)

            def central(i, h):
                orig = flat[i]
                flat[i] = orig + flat.dtype.type(h)
                lp = float(f().data)
                flat[i] = orig - flat.dtype.type(h)
                lm = float(f().data)
                flat[i] = orig
                return (lp - lm) / (2.0 * h)

            for i in idxs:
                fd = central(i, step)
                a = float(an[i])
                mag = max(abs(a), abs(fd))
                if mag < 1e-7:
                    continue
                err = abs(a - fd) / max(mag, 1e-7)
                if err > 1e-4:
                    # a relu kink inside the step window looks like a wrong
                    # gradient; re-estimate with a 16x finer step (a genuinely
                    # wrong formula disagrees at every step size)
                    fd2 = central(i, step / 16.0)
                    mag2 = max(abs(a), abs(fd2))
                    if mag2 >= 1e-7:
                        err = min(err, abs(a - fd2) / max(mag2, 1e-7))
                worst = max(worst, err)
    for t in tensors.values():
        t.grad = None
    return worst


# Binary weight container: magic, version, tensor count; then per tensor the
# name (u32 length + utf-8 bytes), rank (u32), extents (u64 little-endian)
# and raw float32 little-endian values. Round trips are bit exact.

CONTAINER_MAGIC = b"AEROTENS"
CONTAINER_VERSION = 1


def save_tensors(path, named: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<II", CONTAINER_VERSION, len(named)))
        for name, arr in named.items():
            a = np.ascontiguousarray(arr, dtype=DTYPE)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.astype("<f4", copy=False).tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CONTAINER_MAGIC))
        if magic != CONTAINER_MAGIC:
            raise NumericalError(f"{path}: not a weight container (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CONTAINER_VERSION:
            raise NumericalError(f"{path}: unsupported container version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            out[name] = data.astype(DTYPE)
        return out
