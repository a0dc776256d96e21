"""CNN + BLSTM sequence recogniser with hand-written backward pass.

Layout: a stack of conv blocks (same-padded convolution, batch norm, leaky
ReLU, max pooling), column-wise flattening into frames, stacked
bidirectional LSTM layers and a per-frame linear + log-softmax head.

Images in a batch may differ in width.  They are right-padded with
background (zeros) and every block re-zeroes the padded columns, so in
eval mode each item's output is exactly what it would be on its own.  In
train mode batch-norm statistics are taken over the valid positions of the
whole batch.

Everything is float64.  Activations are kept channels-last (N, H, W, C).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from htrner import _kernels as _k


@dataclass(frozen=True)
class ConvBlock:
    filters: int
    kernel: tuple[int, int] = (3, 3)
    pool: tuple[int, int] = (2, 2)

    def to_json(self) -> dict:
        return {"filters": self.filters, "kernel": list(self.kernel), "pool": list(self.pool)}

    @classmethod
    def from_json(cls, obj: dict) -> "ConvBlock":
        return cls(int(obj["filters"]), tuple(obj["kernel"]), tuple(obj["pool"]))


DEFAULT_BLOCKS = (
    ConvBlock(16, (3, 3), (2, 2)),
    ConvBlock(32, (3, 3), (2, 2)),
    ConvBlock(48, (3, 3), (2, 1)),
    ConvBlock(64, (3, 3), (2, 1)),
)


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int
    input_height: int = 64
    conv_blocks: tuple[ConvBlock, ...] = DEFAULT_BLOCKS
    lstm_layers: int = 3
    lstm_hidden: int = 256
    leaky_slope: float = 0.01
    leaky_threshold: float = 0.0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks", tuple(
            b if isinstance(b, ConvBlock) else ConvBlock(b[0], tuple(b[1]), tuple(b[2])) for b in self.conv_blocks
        ))
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.lstm_layers < 1 or self.lstm_hidden < 1:
            raise ValueError("need at least one LSTM layer with a positive hidden size")
        for b in self.conv_blocks:
            if b.kernel[0] % 2 == 0 or b.kernel[1] % 2 == 0:
                raise ValueError("conv kernels must have odd sizes for same padding")
        if self.input_height % self.pool_height != 0:
            raise ValueError(
                f"product of pool heights {self.pool_height} does not divide input_height {self.input_height}"
            )

    @property
    def pool_height(self) -> int:
        return int(np.prod([b.pool[0] for b in self.conv_blocks]))

    @property
    def pool_width(self) -> int:
        return int(np.prod([b.pool[1] for b in self.conv_blocks]))

    @property
    def frame_dim(self) -> int:
        channels = self.conv_blocks[-1].filters if self.conv_blocks else 1
        return channels * (self.input_height // self.pool_height)

    @property
    def is_standard_layout(self) -> bool:
        return len(self.conv_blocks) == 4 and self.lstm_layers == 3

    def frames_for_width(self, width: int) -> int:
        return -(-width // self.pool_width)

    def with_classes(self, num_classes: int) -> "NetworkConfig":
        return replace(self, num_classes=num_classes)

    def to_json(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_height": self.input_height,
            "conv_blocks": [b.to_json() for b in self.conv_blocks],
            "lstm_layers": self.lstm_layers,
            "lstm_hidden": self.lstm_hidden,
            "leaky_slope": self.leaky_slope,
            "leaky_threshold": self.leaky_threshold,
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NetworkConfig":
        obj = dict(obj)
        obj["conv_blocks"] = tuple(ConvBlock.from_json(b) for b in obj["conv_blocks"])
        return cls(**obj)


# Parameters ---------------------------------------------------------------


@dataclass
class ParamStore:
    """Trainable arrays plus non-trainable batch-norm running statistics."""

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        if name in self.params:
            return self.params[name]
        return self.buffers[name]

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()}, {k: v.copy() for k, v in self.buffers.items()})

    def num_trainable(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def digest(self, include_output: bool = True) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params) + sorted(self.buffers):
            if not include_output and name.startswith("out."):
                continue
            arr = self[name]
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _lstm_input_dims(config: NetworkConfig) -> list[int]:
    return [config.frame_dim] + [2 * config.lstm_hidden] * (config.lstm_layers - 1)


def init_params(config: NetworkConfig, seed: int = 0) -> ParamStore:
    """Glorot-uniform weights, zero biases, forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    c_in = 1
    for b, blk in enumerate(config.conv_blocks):
        kh, kw = blk.kernel
        params[f"conv{b}.weight"] = _glorot(rng, (blk.filters, c_in, kh, kw), c_in * kh * kw, blk.filters * kh * kw)
        params[f"conv{b}.bias"] = np.zeros(blk.filters)
        params[f"bn{b}.scale"] = np.ones(blk.filters)
        params[f"bn{b}.shift"] = np.zeros(blk.filters)
        buffers[f"bn{b}.running_mean"] = np.zeros(blk.filters)
        buffers[f"bn{b}.running_var"] = np.ones(blk.filters)
        c_in = blk.filters
    H = config.lstm_hidden
    for layer, d_in in enumerate(_lstm_input_dims(config)):
        for direction in ("fw", "bw"):
            p = f"lstm{layer}.{direction}"
            params[f"{p}.w_ih"] = _glorot(rng, (4 * H, d_in), d_in, 4 * H)
            params[f"{p}.w_hh"] = _glorot(rng, (4 * H, H), H, 4 * H)
            bias = np.zeros(4 * H)
            bias[H:2 * H] = 1.0
            params[f"{p}.bias"] = bias
    params["out.weight"] = _glorot(rng, (config.num_classes, 2 * H), 2 * H, config.num_classes)
    params["out.bias"] = np.zeros(config.num_classes)
    return ParamStore(params, buffers)


def param_count(config: NetworkConfig) -> int:
    """Closed-form number of trainable scalars."""
    total = 0
    c_in = 1
    for blk in config.conv_blocks:
        kh, kw = blk.kernel
        total += blk.filters * c_in * kh * kw + blk.filters + 2 * blk.filters
        c_in = blk.filters
    H = config.lstm_hidden
    for d_in in _lstm_input_dims(config):
        total += 2 * (4 * H * d_in + 4 * H * H + 4 * H)
    total += config.num_classes * 2 * H + config.num_classes
    return total


def check_params(params: ParamStore, config: NetworkConfig) -> None:
    ref = init_params(config, 0)
    for name, arr in list(ref.params.items()) + list(ref.buffers.items()):
        try:
            got = params[name]
        except KeyError:
            raise ValueError(f"missing parameter {name}") from None
        if got.shape != arr.shape:
            raise ValueError(f"parameter {name} has shape {got.shape}, expected {arr.shape}")
        if not np.all(np.isfinite(got)):
            raise ValueError(f"parameter {name} has non-finite values")


def replace_output_layer(params: ParamStore, new_num_classes: int, rng_seed: int) -> ParamStore:
    """Copy of ``params`` with a freshly initialised output layer of ``new_num_classes`` rows."""
    if new_num_classes < 2:
        raise ValueError("output layer needs at least 2 classes")
    out = params.copy()
    two_h = params["out.weight"].shape[1]
    rng = np.random.default_rng(rng_seed)
    out.params["out.weight"] = _glorot(rng, (new_num_classes, two_h), two_h, new_num_classes)
    out.params["out.bias"] = np.zeros(new_num_classes)
    return out


# Elementary layers ---------------------------------------------------------


def leaky_relu(x, slope: float = 0.01, threshold: float = 0.0):
    """``x`` where ``x > threshold``, ``slope * x`` elsewhere."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > threshold, x, slope * x)
    return out if out.ndim else float(out)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Same-padded convolution on NHWC input; ``weight`` is (F, C, kh, kw)."""
    F, C, kh, kw = weight.shape
    N, H, W, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2)).reshape(N * H * W, C * kh * kw)
    wmat = weight.reshape(F, C * kh * kw)
    z = (cols @ wmat.T + bias).reshape(N, H, W, F)
    return z, cols


def conv2d_backward(dz: np.ndarray, cols: np.ndarray, weight: np.ndarray, need_input: bool = True):
    F, C, kh, kw = weight.shape
    N, H, W, _ = dz.shape
    dz2 = dz.reshape(N * H * W, F)
    dweight = (dz2.T @ cols).reshape(weight.shape)
    dbias = dz2.sum(axis=0)
    if not need_input:
        return None, dweight, dbias
    dcols = (dz2 @ weight.reshape(F, C * kh * kw)).reshape(N, H, W, C, kh, kw)
    ph, pw = kh // 2, kw // 2
    dxp = np.zeros((N, H + 2 * ph, W + 2 * pw, C))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + H, j:j + W, :] += dcols[..., i, j]
    return dxp[:, ph:ph + H, pw:pw + W, :], dweight, dbias


def batchnorm_forward(z, scale, shift, mode, running_mean, running_var, eps=1e-5, mask=None):
    """Per-channel batch norm over all axes but the last.

    ``mask`` (broadcastable to ``z`` minus the channel axis, with a trailing
    1) selects the positions that enter the batch statistics.  Returns the
    output, a backward cache and, in train mode, the batch (mean, var).
    """
    if mode == "train":
        if mask is None:
            count = z.size // z.shape[-1]
            mean = z.reshape(-1, z.shape[-1]).mean(axis=0)
            cen = z - mean
            var = (cen**2).reshape(-1, z.shape[-1]).mean(axis=0)
        else:
            count = float(np.broadcast_to(mask, z.shape[:-1] + (1,)).sum())
            mean = (z * mask).reshape(-1, z.shape[-1]).sum(axis=0) / count
            cen = z - mean
            var = ((cen * mask) ** 2).reshape(-1, z.shape[-1]).sum(axis=0) / count
        if count < 2:
            raise ValueError("batch norm needs at least two positions per channel in train mode")
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = cen * inv_std
        stats = (mean, var)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (z - running_mean) * inv_std
        count = None
        stats = None
    y = xhat * scale + shift
    cache = (mode, xhat, inv_std, scale, mask, count)
    return y, cache, stats


def batchnorm_backward(dy, cache):
    mode, xhat, inv_std, scale, mask, count = cache
    C = dy.shape[-1]
    if mask is not None:
        dy = dy * mask
    dscale = (dy * xhat).reshape(-1, C).sum(axis=0)
    dshift = dy.reshape(-1, C).sum(axis=0)
    if mode != "train":
        return dy * (scale * inv_std), dscale, dshift
    # mean/var are functions of the (masked) inputs in train mode
    dz = (scale * inv_std) * (dy - dshift / count - xhat * (dscale / count))
    if mask is not None:
        dz = dz * mask
    return dz, dscale, dshift


def maxpool_forward(a: np.ndarray, pool: tuple[int, int]):
    ph, pw = pool
    if ph == 1 and pw == 1:
        return a, None
    N, H, W, C = a.shape
    r = a.reshape(N, H // ph, ph, W // pw, pw, C).transpose(0, 1, 3, 5, 2, 4).reshape(N, H // ph, W // pw, C, ph * pw)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return out, (idx, a.shape)


def maxpool_backward(dout: np.ndarray, cache, pool: tuple[int, int]):
    if cache is None:
        return dout
    idx, shape = cache
    N, H, W, C = shape
    ph, pw = pool
    dr = np.zeros(idx.shape + (ph * pw,))
    np.put_along_axis(dr, idx[..., None], dout[..., None], axis=-1)
    return dr.reshape(N, H // ph, W // pw, C, ph, pw).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


def conv_pool_block_forward(x, p, blk: ConvBlock, config: NetworkConfig, mode: str, widths=None, running=None):
    """Convolution -> batch norm -> leaky ReLU -> max pool on NHWC input.

    ``p`` holds ``weight, bias, scale, shift``; ``running`` is the
    (mean, var) pair used in eval mode.  ``widths`` gives the number of
    valid columns per item (default: all); padded columns come out zero and
    stay out of the batch statistics.  Returns ``(out, cache, batch_stats)``.
    """
    N, H, W, _ = x.shape
    if widths is None:
        widths = np.full(N, W)
    widths = np.asarray(widths, dtype=np.int64)
    if H % blk.pool[0] or np.any(widths % blk.pool[1]) or W % blk.pool[1]:
        raise ValueError(f"feature map {H}x{W} not divisible by pool {blk.pool}")
    z, cols = conv2d_forward(x, p["weight"], p["bias"])
    if mode == "train":
        mean, var, count = _k.masked_moments(z, widths)
        if count < 2:
            raise ValueError("batch norm needs at least two positions per channel in train mode")
        stats = (mean, var)
    elif mode == "eval":
        mean, var = running
        count = 0
        stats = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + config.bn_eps)
    out, arg = _k.bn_act_pool_forward(
        z, widths, mean, inv_std, p["scale"], p["shift"],
        config.leaky_slope, config.leaky_threshold, blk.pool[0], blk.pool[1],
    )
    cache = (cols, z, widths, mean, inv_std, count, arg, mode)
    return out, cache, stats


def conv_pool_block_backward(dout, cache, p, blk: ConvBlock, config: NetworkConfig, need_input=True):
    cols, z, widths, mean, inv_std, count, arg, mode = cache
    dz, dscale, dshift = _k.bn_act_pool_backward(
        np.ascontiguousarray(dout), arg, z, widths, mean, inv_std, p["scale"], p["shift"],
        config.leaky_slope, config.leaky_threshold, blk.pool[0], blk.pool[1], mode == "train", float(count),
    )
    dx, dweight, dbias = conv2d_backward(dz, cols, p["weight"], need_input)
    return dx, {"weight": dweight, "bias": dbias, "scale": dscale, "shift": dshift}


def lstm_forward_reference(x: np.ndarray, w_ih: np.ndarray, w_hh: np.ndarray, bias: np.ndarray):
    """Plain numpy twin of :func:`lstm_forward`; unidirectional LSTM over time-major input ``x`` (T, N, D), zero initial state.

    Gate order in the stacked weights is input, forget, cell, output.
    """
    T, N, D = x.shape
    H = w_hh.shape[1]
    pre = (x.reshape(T * N, D) @ w_ih.T + bias).reshape(T, N, 4 * H)
    acts = np.empty((T, N, 4 * H))
    cs = np.empty((T, N, H))
    tcs = np.empty((T, N, H))
    hs = np.empty((T, N, H))
    h = np.zeros((N, H))
    c = np.zeros((N, H))
    w_hh_t = w_hh.T.copy()
    for t in range(T):
        g = pre[t] + h @ w_hh_t
        act = acts[t]
        act[:, :2 * H] = expit(g[:, :2 * H])
        act[:, 2 * H:3 * H] = np.tanh(g[:, 2 * H:3 * H])
        act[:, 3 * H:] = expit(g[:, 3 * H:])
        c = act[:, H:2 * H] * c + act[:, :H] * act[:, 2 * H:3 * H]
        cs[t] = c
        tc = np.tanh(c)
        tcs[t] = tc
        h = act[:, 3 * H:] * tc
        hs[t] = h
    return hs, (x, acts, cs, tcs, hs)


def lstm_backward_reference(dhs: np.ndarray, cache, w_ih: np.ndarray, w_hh: np.ndarray):
    x, acts, cs, tcs, hs = cache
    T, N, D = x.shape
    H = w_hh.shape[1]
    dpre = np.empty((T, N, 4 * H))
    dh_next = np.zeros((N, H))
    dc_next = np.zeros((N, H))
    zeros = np.zeros((N, H))
    for t in range(T - 1, -1, -1):
        act = acts[t]
        i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
        tc = tcs[t]
        dh = dhs[t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        c_prev = cs[t - 1] if t > 0 else zeros
        d = dpre[t]
        d[:, :H] = dc * g * i * (1.0 - i)
        d[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        d[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        d[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = d @ w_hh
    d2 = dpre.reshape(T * N, 4 * H)
    h_prev = np.concatenate([np.zeros((1, N, H)), hs[:-1]], axis=0).reshape(T * N, H)
    dw_hh = d2.T @ h_prev
    dw_ih = d2.T @ x.reshape(T * N, D)
    dbias = d2.sum(axis=0)
    dx = (d2 @ w_ih).reshape(T, N, D)
    return dx, dw_ih, dw_hh, dbias


def lstm_forward(x: np.ndarray, w_ih: np.ndarray, w_hh: np.ndarray, bias: np.ndarray):
    """Unidirectional LSTM over time-major ``x`` (T, N, D) from zero state.

    Gate order in the stacked weights is input, forget, cell, output.
    Returns hidden states (T, N, H) and a backward cache.
    """
    T, N, D = x.shape
    H = w_hh.shape[1]
    pre = (x.reshape(T * N, D) @ w_ih.T + bias).reshape(T, N, 4 * H)
    acts, cs, tcs, hs = _k.lstm_recurrence(pre, np.ascontiguousarray(w_hh.T))
    return hs, (x, acts, cs, tcs, hs)


def lstm_backward(dhs: np.ndarray, cache, w_ih: np.ndarray, w_hh: np.ndarray):
    x, acts, cs, tcs, hs = cache
    T, N, D = x.shape
    H = w_hh.shape[1]
    dpre = _k.lstm_recurrence_backward(np.ascontiguousarray(dhs), acts, cs, tcs, np.ascontiguousarray(w_hh))
    d2 = dpre.reshape(T * N, 4 * H)
    h_prev = np.concatenate([np.zeros((1, N, H)), hs[:-1]], axis=0).reshape(T * N, H)
    dw_hh = d2.T @ h_prev
    dw_ih = d2.T @ x.reshape(T * N, D)
    dbias = d2.sum(axis=0)
    dx = (d2 @ w_ih).reshape(T, N, D)
    return dx, dw_ih, dw_hh, dbias


def _reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """(T, N) gather index reversing each column within its length; an involution."""
    t = np.arange(T)[:, None]
    lengths = lengths[None, :]
    return np.where(t < lengths, lengths - 1 - t, t)


def blstm_forward(x: np.ndarray, p: dict, lengths: np.ndarray | None = None):
    """Bidirectional LSTM; ``p`` maps ``fw.w_ih`` etc. to arrays.  Output (T, N, 2H)."""
    T, N, _ = x.shape
    if lengths is None:
        lengths = np.full(N, T)
    cols = np.arange(N)[None, :]
    rev = _reverse_index(lengths, T)
    h_fw, c_fw = lstm_forward(x, p["fw.w_ih"], p["fw.w_hh"], p["fw.bias"])
    h_bw_rev, c_bw = lstm_forward(x[rev, cols], p["bw.w_ih"], p["bw.w_hh"], p["bw.bias"])
    out = np.concatenate([h_fw, h_bw_rev[rev, cols]], axis=-1)
    valid = (np.arange(T)[:, None] < lengths[None, :])[..., None]
    out = out * valid
    return out, (c_fw, c_bw, rev, valid)


def blstm_backward(dout: np.ndarray, cache, p: dict):
    c_fw, c_bw, rev, valid = cache
    H = p["fw.w_hh"].shape[1]
    N = dout.shape[1]
    cols = np.arange(N)[None, :]
    dout = dout * valid
    dx_fw, *g_fw = lstm_backward(dout[..., :H], c_fw, p["fw.w_ih"], p["fw.w_hh"])
    dx_bw_rev, *g_bw = lstm_backward(dout[..., H:][rev, cols], c_bw, p["bw.w_ih"], p["bw.w_hh"])
    dx = dx_fw + dx_bw_rev[rev, cols]
    grads = {}
    for d, g in (("fw", g_fw), ("bw", g_bw)):
        grads[f"{d}.w_ih"], grads[f"{d}.w_hh"], grads[f"{d}.bias"] = g
    return dx, grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# Whole network -------------------------------------------------------------


@dataclass
class ForwardCache:
    mode: str
    widths: list[int]
    frames: np.ndarray
    blocks: list
    conv_out_shape: tuple
    lstm: list
    top: np.ndarray
    log_probs: np.ndarray
    bn_stats: dict[str, tuple[np.ndarray, np.ndarray]]

    def activation_pattern(self, params: ParamStore, config: NetworkConfig) -> list[np.ndarray]:
        """Leaky-ReLU branches and pool winners over valid positions.

        Two parameter settings with equal patterns lie in the same smooth
        piece of the network function.
        """
        parts = []
        for b, (cols, z, widths, mean, inv_std, count, arg, mode) in enumerate(self.blocks):
            y = (z - mean) * inv_std * params[f"bn{b}.scale"] + params[f"bn{b}.shift"]
            pw = config.conv_blocks[b].pool[1]
            for n, w in enumerate(widths):
                parts.append(y[n, :, :w] > config.leaky_threshold)
                parts.append(arg[n, :, : w // pw].copy())
        return parts


def _block_params(params: ParamStore, b: int) -> dict:
    return {
        "weight": params[f"conv{b}.weight"],
        "bias": params[f"conv{b}.bias"],
        "scale": params[f"bn{b}.scale"],
        "shift": params[f"bn{b}.shift"],
    }


def _lstm_params(params: ParamStore, layer: int) -> dict:
    pre = f"lstm{layer}."
    return {k[len(pre):]: v for k, v in params.params.items() if k.startswith(pre)}


def forward_batch(
    params: ParamStore,
    config: NetworkConfig,
    images: Sequence[np.ndarray],
    mode: str = "eval",
) -> tuple[list[np.ndarray], ForwardCache]:
    """Per-item ``(T_i, K)`` log-probabilities for a batch of grayscale images.

    Each image is ``(input_height, W_i)`` with 0 = background; widths are
    padded up to a multiple of the total pooling width, giving
    ``T_i = ceil(W_i / pool_width)`` frames.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if not images:
        raise ValueError("empty batch")
    H0 = config.input_height
    pw_total = config.pool_width
    widths = []
    for img in images:
        if img.ndim != 2 or img.shape[0] != H0:
            raise ValueError(f"image must be 2-D with height {H0}, got shape {img.shape}")
        if img.shape[1] < 1:
            raise ValueError("image has zero width")
        widths.append(img.shape[1])
    padded = [config.frames_for_width(w) * pw_total for w in widths]
    N, Wmax = len(images), max(padded)
    x = np.zeros((N, H0, Wmax, 1))
    for n, img in enumerate(images):
        x[n, :, : img.shape[1], 0] = img
    valid_cols = np.array(padded)

    block_caches = []
    bn_stats = {}
    for b, blk in enumerate(config.conv_blocks):
        running = (params[f"bn{b}.running_mean"], params[f"bn{b}.running_var"])
        x, cache, stats = conv_pool_block_forward(x, _block_params(params, b), blk, config, mode, valid_cols, running)
        block_caches.append(cache)
        if stats is not None:
            bn_stats[f"bn{b}"] = stats
        valid_cols = valid_cols // blk.pool[1]

    conv_out_shape = x.shape
    N, h, T, C = x.shape
    # frame feature index = channel * remaining_height + row
    frames = x.transpose(2, 0, 3, 1).reshape(T, N, C * h)
    lengths = valid_cols
    seq = frames
    lstm_caches = []
    for layer in range(config.lstm_layers):
        seq, cache = blstm_forward(seq, _lstm_params(params, layer), lengths)
        lstm_caches.append(cache)
    logits = seq @ params["out.weight"].T + params["out.bias"]
    log_probs = log_softmax(logits)
    outputs = [log_probs[: lengths[n], n].copy() for n in range(N)]
    cache = ForwardCache(mode, widths, frames, block_caches, conv_out_shape, lstm_caches, seq, log_probs, bn_stats)
    return outputs, cache


def forward(image: np.ndarray, params: ParamStore, config: NetworkConfig, mode: str = "eval") -> np.ndarray:
    """Log-probabilities ``(T, K)`` for a single image."""
    outputs, _ = forward_batch(params, config, [image], mode)
    return outputs[0]


def backward(
    grad_log_probs: Sequence[np.ndarray],
    cache: ForwardCache,
    params: ParamStore,
    config: NetworkConfig,
    need_input_grad: bool = False,
) -> tuple[dict[str, np.ndarray], list[np.ndarray] | None]:
    """Gradients of a scalar loss given ``d loss / d log_probs`` per item.

    Returns a dict keyed like ``params.params`` and, if requested, the
    gradient w.r.t. each input image (original width).
    """
    if cache is None:
        raise ValueError("backward needs the cache of a forward pass")
    T, N, K = cache.log_probs.shape
    g = np.zeros((T, N, K))
    for n, gl in enumerate(grad_log_probs):
        g[: gl.shape[0], n] = gl
    probs = np.exp(cache.log_probs)
    dlogits = g - probs * g.sum(axis=-1, keepdims=True)
    grads: dict[str, np.ndarray] = {}
    top = cache.top
    grads["out.weight"] = dlogits.reshape(T * N, K).T @ top.reshape(T * N, -1)
    grads["out.bias"] = dlogits.reshape(T * N, K).sum(axis=0)
    dseq = dlogits @ params["out.weight"]
    for layer in range(config.lstm_layers - 1, -1, -1):
        dseq, lg = blstm_backward(dseq, cache.lstm[layer], _lstm_params(params, layer))
        for k, v in lg.items():
            grads[f"lstm{layer}.{k}"] = v
    N_, h, T_, C = cache.conv_out_shape
    dx = dseq.reshape(T_, N_, C, h).transpose(1, 3, 0, 2)
    for b in range(len(config.conv_blocks) - 1, -1, -1):
        need = b > 0 or need_input_grad
        dx, bg = conv_pool_block_backward(
            dx, cache.blocks[b], _block_params(params, b), config.conv_blocks[b], config, need_input=need
        )
        grads[f"conv{b}.weight"] = bg["weight"]
        grads[f"conv{b}.bias"] = bg["bias"]
        grads[f"bn{b}.scale"] = bg["scale"]
        grads[f"bn{b}.shift"] = bg["shift"]
    input_grads = None
    if need_input_grad:
        input_grads = [dx[n, :, :w, 0].copy() for n, w in enumerate(cache.widths)]
    return {k: grads[k] for k in params.params}, input_grads


def update_running_stats(params: ParamStore, cache: ForwardCache, config: NetworkConfig) -> None:
    """Fold the train-mode batch statistics of ``cache`` into the running averages."""
    m = config.bn_momentum
    for name, (mean, var) in cache.bn_stats.items():
        params.buffers[f"{name}.running_mean"] = m * params.buffers[f"{name}.running_mean"] + (1 - m) * mean
        params.buffers[f"{name}.running_var"] = m * params.buffers[f"{name}.running_var"] + (1 - m) * var
