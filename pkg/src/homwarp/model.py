"""Convolutional regressor for the eight free elements of a normalized homography.

Layout is VGG-like: eight 3x3 same-padded convolutions with ReLU, a 2x2/2 max
pool after every second one, global average pooling, a ReLU fully connected
layer, dropout, and a linear output layer. Inputs are ``(N, 2, S, S)`` stacks
of (patch_a, patch_b).
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    CheckpointError,
    DimensionMismatch,
    NonFiniteActivation,
    ShapeMismatch,
    StaleCache,
)
from .geometry import IDENTITY_FREE


@dataclass(frozen=True)
class RegressorConfig:
    side: int = 128
    channels: int = 2
    filters: tuple = (64, 64, 64, 64, 128, 128, 128, 128)
    pool_every: int = 2
    fc1: int = 1024
    dropout: float = 0.5
    outputs: int = 8

    @classmethod
    def full(cls) -> RegressorConfig:
        return cls()

    @classmethod
    def desk(cls, side: int = 32) -> RegressorConfig:
        return cls(side=side, filters=(4, 4, 4, 4, 8, 8, 8, 8), fc1=64, dropout=0.5)

    def layer_names(self) -> list[str]:
        names = [f"conv{i}" for i in range(len(self.filters))]
        return names + ["fc1", "fc2"]

    def shapes(self) -> dict[str, tuple]:
        out = {}
        cin = self.channels
        for i, cout in enumerate(self.filters):
            out[f"conv{i}.w"] = (cout, cin, 3, 3)
            out[f"conv{i}.b"] = (cout,)
            cin = cout
        out["fc1.w"] = (self.fc1, cin)
        out["fc1.b"] = (self.fc1,)
        out["fc2.w"] = (self.outputs, self.fc1)
        out["fc2.b"] = (self.outputs,)
        return out

    def pooled_after(self, i: int) -> bool:
        return (i + 1) % self.pool_every == 0

    def spatial_sizes(self) -> list[int]:
        """Spatial side after each pooling step, starting with the input side."""
        sizes = [self.side]
        for i in range(len(self.filters)):
            if self.pooled_after(i):
                sizes.append(-(-sizes[-1] // 2))
        return sizes


@dataclass
class RegressorParams:
    """Weights plus gradient and momentum buffers, keyed ``layer.w`` / ``layer.b``."""

    config: RegressorConfig
    values: dict
    grads: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)
    version: int = 0

    def __post_init__(self):
        for k, v in self.values.items():
            self.grads.setdefault(k, np.zeros_like(v))
            self.velocity.setdefault(k, np.zeros_like(v))

    @property
    def dtype(self):
        return next(iter(self.values.values())).dtype

    def astype(self, dtype) -> RegressorParams:
        return RegressorParams(self.config, {k: v.astype(dtype) for k, v in self.values.items()})

    def copy(self) -> RegressorParams:
        return RegressorParams(self.config, {k: v.copy() for k, v in self.values.items()},
                               {k: v.copy() for k, v in self.grads.items()},
                               {k: v.copy() for k, v in self.velocity.items()}, self.version)

    def bump(self):
        self.version += 1


def init_params(config: RegressorConfig, seed: int, dtype=np.float32) -> RegressorParams:
    """He-normal weights (std sqrt(2/fan_in)); zero biases except the output layer.

    The output bias starts at the identity's free elements so an untrained
    model predicts "no motion" rather than a singular matrix.
    """
    rng = np.random.default_rng(seed)
    values = {}
    for name, shape in config.shapes().items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            values[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        else:
            values[name] = np.zeros(shape, dtype=dtype)
    if config.outputs == 8:
        values["fc2.b"] = IDENTITY_FREE.astype(dtype)
    return RegressorParams(config, values)


def identity_params(config: RegressorConfig, dtype=np.float32) -> RegressorParams:
    """Parameters whose prediction is always the identity homography."""
    p = init_params(config, 0, dtype)
    for v in p.values.values():
        v[...] = 0
    p.values["fc2.b"] = IDENTITY_FREE.astype(dtype)
    return p


def stack_pair(patch_a: np.ndarray, patch_b: np.ndarray) -> np.ndarray:
    """Channel-stack two patches (or two batches of patches): channel 0 is patch_a."""
    patch_a = np.asarray(patch_a)
    patch_b = np.asarray(patch_b)
    if patch_a.shape != patch_b.shape:
        raise DimensionMismatch(f"{patch_a.shape} vs {patch_b.shape}")
    return np.stack([patch_a, patch_b], axis=-3)


# -- layers --------------------------------------------------------------------

def conv3x3(x, w, b):
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))          # n c h w 3 3
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2), cols


def conv3x3_backward(dout, cols, w, x_shape):
    n, c, h, wd = x_shape
    o = w.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(o, -1)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + wd] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dw, db


def maxpool2(x):
    """2x2 stride-2 max pool; odd sides are padded with -inf (ceil mode).

    Ties go to the first element in row-major window order.
    """
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    h2, w2 = x.shape[2] // 2, x.shape[3] // 2
    win = x.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, (n, c, h, w))


def maxpool2_backward(dout, cache):
    idx, (n, c, h, w) = cache
    h2, w2 = dout.shape[2:]
    win = np.zeros((n, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    dx = win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    return dx[:, :, :h, :w]


# -- network -------------------------------------------------------------------

@dataclass
class ForwardCache:
    version: int
    params_id: int
    input_shape: tuple
    layers: list
    dropout_mask: np.ndarray | None


def forward(params: RegressorParams, x: np.ndarray, train: bool = False, rng=None):
    """Run the network; returns ``(pred, cache)`` with ``pred`` shaped ``(N, 8)``.

    ``cache`` is ``None`` in eval mode. In train mode dropout (inverted, scaled by
    1/(1-p)) draws its mask from ``rng``.
    """
    cfg = params.config
    v = params.values
    x = np.asarray(x, dtype=params.dtype)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != (cfg.channels, cfg.side, cfg.side):
        raise ShapeMismatch(f"input {x.shape[1:]} does not match config "
                            f"{(cfg.channels, cfg.side, cfg.side)}")
    layers = []
    a = x
    for i in range(len(cfg.filters)):
        z, cols = conv3x3(a, v[f"conv{i}.w"], v[f"conv{i}.b"])
        layers.append(("conv", i, a.shape, cols, z))
        a = np.maximum(z, 0)
        if cfg.pooled_after(i):
            a, pc = maxpool2(a)
            layers.append(("pool", pc))
    hw = a.shape[2:]
    feat = a.mean(axis=(2, 3))
    layers.append(("gap", hw))
    z1 = feat @ v["fc1.w"].T + v["fc1.b"]
    layers.append(("fc1", feat, z1))
    a1 = np.maximum(z1, 0)
    mask = None
    if train and cfg.dropout > 0:
        if rng is None:
            raise ValueError("train-mode forward with dropout needs an rng")
        keep = 1.0 - cfg.dropout
        mask = ((rng.random(a1.shape) < keep) / keep).astype(a1.dtype)
        a1 = a1 * mask
    out = a1 @ v["fc2.w"].T + v["fc2.b"]
    layers.append(("fc2", a1))
    if not np.all(np.isfinite(out)):
        raise NonFiniteActivation("network output is not finite")
    if not train:
        return out, None
    return out, ForwardCache(params.version, id(params), x.shape, layers, mask)


def backward(params: RegressorParams, cache: ForwardCache, dout: np.ndarray,
             need_input_grad: bool = False):
    """Backpropagate ``dout = d(loss)/d(pred)``; gradients go to ``params.grads``.

    Returns the gradient w.r.t. the network input when ``need_input_grad``.
    """
    if cache is None:
        raise StaleCache("no train-mode cache available")
    if cache.version != params.version or cache.params_id != id(params):
        raise StaleCache("parameters changed since the forward pass")
    v = params.values
    g = params.grads
    dout = np.asarray(dout, dtype=params.dtype)
    layers = list(cache.layers)

    _, a1 = layers.pop()
    g["fc2.w"] = dout.T @ a1
    g["fc2.b"] = dout.sum(axis=0)
    da1 = dout @ v["fc2.w"]
    if cache.dropout_mask is not None:
        da1 = da1 * cache.dropout_mask
    _, feat, z1 = layers.pop()
    dz1 = da1 * (z1 > 0)
    g["fc1.w"] = dz1.T @ feat
    g["fc1.b"] = dz1.sum(axis=0)
    dfeat = dz1 @ v["fc1.w"]
    _, (h, w) = layers.pop()
    da = np.broadcast_to(dfeat[:, :, None, None] / (h * w), dfeat.shape + (h, w))
    while layers:
        entry = layers.pop()
        if entry[0] == "pool":
            da = maxpool2_backward(da, entry[1])
            continue
        _, i, x_shape, cols, z = entry
        dz = da * (z > 0)
        if i == 0 and not need_input_grad:
            _, g[f"conv{i}.w"], g[f"conv{i}.b"] = _conv_param_grads(dz, cols, v[f"conv{i}.w"])
            da = None
            break
        da, g[f"conv{i}.w"], g[f"conv{i}.b"] = conv3x3_backward(dz, cols, v[f"conv{i}.w"], x_shape)
    return da


def _conv_param_grads(dz, cols, w):
    o = w.shape[0]
    d2 = dz.transpose(0, 2, 3, 1).reshape(-1, o)
    return None, (d2.T @ cols).reshape(w.shape), d2.sum(axis=0)


def zero_grads(params: RegressorParams):
    for k in params.grads:
        params.grads[k] = np.zeros_like(params.values[k])


# -- losses --------------------------------------------------------------------

def l2_homography_loss(pred, target):
    """Mean squared difference over the 8 elements, and its gradient w.r.t. ``pred``.

    Batched inputs ``(N, 8)`` give one loss per row.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    diff = pred - target
    k = pred.shape[-1]
    loss = (diff ** 2).sum(axis=-1) / k
    grad = 2.0 * diff / k
    if pred.ndim == 1:
        return float(loss), grad
    return loss, grad


def total_loss(pred, target, warped, target_patch, w2: float = 1.0, w1: float = 1.0) -> float:
    """``w2 * L2 + w1 * L1``; a missing target (``None`` or NaN) drops the L2 term."""
    from .warp import l1_photometric

    if w1 < 0 or w2 < 0:
        raise ValueError("loss weights must be non-negative")
    l1, _ = l1_photometric(warped, target_patch)
    value = w1 * l1
    if target is not None and not np.any(np.isnan(target)):
        l2, _ = l2_homography_loss(pred, target)
        value += w2 * l2
    return float(value)


def predict(params: RegressorParams, patch_a, patch_b) -> np.ndarray:
    """Eval-mode prediction for one pair ``(S, S)`` or a batch ``(N, S, S)``."""
    x = stack_pair(patch_a, patch_b)
    out, _ = forward(params, x, train=False)
    out = out.astype(np.float64)
    return out[0] if np.asarray(patch_a).ndim == 2 else out


# -- checkpoints -----------------------------------------------------------------

MAGIC = b"STNH"
FORMAT_VERSION = 1
FLAG_F64 = 1


def save_checkpoint(params: RegressorParams, path) -> None:
    """Write ``params`` in the little-endian STNH format.

    Layout: magic, u32 version, u32 flags (bit 0 = float64 tensors), u32 side,
    u32 channels, u32 pool_every, u32 n_conv, u32 filters[n_conv], u32 fc1,
    u32 outputs, f64 dropout, then each tensor in declaration order (w then b
    per layer).
    """
    Path(path).write_bytes(checkpoint_bytes(params))


def checkpoint_bytes(params: RegressorParams) -> bytes:
    cfg = params.config
    f64 = params.dtype == np.float64
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", FORMAT_VERSION, FLAG_F64 if f64 else 0, cfg.side))
    buf.write(struct.pack("<III", cfg.channels, cfg.pool_every, len(cfg.filters)))
    buf.write(struct.pack(f"<{len(cfg.filters)}I", *cfg.filters))
    buf.write(struct.pack("<IId", cfg.fc1, cfg.outputs, cfg.dropout))
    dt = "<f8" if f64 else "<f4"
    for name in cfg.shapes():
        buf.write(np.ascontiguousarray(params.values[name], dtype=dt).tobytes())
    return buf.getvalue()


def load_checkpoint(path) -> RegressorParams:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(data)


def checkpoint_from_bytes(data: bytes) -> RegressorParams:
    try:
        if data[:4] != MAGIC:
            raise CheckpointError("bad checkpoint magic")
        version, flags, side = struct.unpack_from("<III", data, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        channels, pool_every, n_conv = struct.unpack_from("<III", data, 16)
        filters = struct.unpack_from(f"<{n_conv}I", data, 28)
        pos = 28 + 4 * n_conv
        fc1, outputs, dropout = struct.unpack_from("<IId", data, pos)
        pos += 16
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint header") from exc
    cfg = RegressorConfig(side, channels, tuple(filters), pool_every, fc1, dropout, outputs)
    dt = np.dtype("<f8" if flags & FLAG_F64 else "<f4")
    values = {}
    for name, shape in cfg.shapes().items():
        count = int(np.prod(shape))
        end = pos + count * dt.itemsize
        if end > len(data):
            raise CheckpointError("truncated checkpoint tensors")
        values[name] = np.frombuffer(data, dt, count, pos).reshape(shape).astype(dt.newbyteorder("="))
        pos = end
    if pos != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return RegressorParams(cfg, values)
