"""Forward and backward kernels for the layers FastNet is built from.

All kernels are pure functions over numpy arrays: they never modify their
inputs, except ``batchnorm_forward`` in train mode, which updates the
running statistics held in its ``BatchNormParams``.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor_core import channel_moments, matmul

# Target number of im2col columns per matmul. Large enough to keep BLAS
# busy, small enough that the column buffer stays in cache.
_COLS_PER_CHUNK = 1024


@dataclass
class ConvParams:
    weight: np.ndarray  # (Cout, Cin, K, K)
    bias: np.ndarray  # (Cout,)
    padding: int

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"conv weight must be (Cout, Cin, K, K), got {self.weight.shape}")
        k = self.kernel_size
        if (k, self.padding) not in ((3, 1), (1, 0)):
            raise ValueError(f"unsupported kernel/padding combination K={k}, padding={self.padding}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("conv bias must have one entry per output channel")

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.99

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")

    @classmethod
    def fresh(cls, channels, dtype=np.float32, **kw):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )

    @property
    def channels(self):
        return self.gamma.shape[0]


@dataclass
class BatchNormCache:
    mode: str
    x_hat: np.ndarray = None
    inv_std: np.ndarray = None


@dataclass
class PoolCache:
    # Winning position in each 2x2 window: 0 top-left, 1 top-right,
    # 2 bottom-left, 3 bottom-right.
    argmax: np.ndarray
    input_shape: tuple


def _per_channel(v):
    return v[None, :, None, None]


# --- convolution ---------------------------------------------------------


def _check_conv_input(x, p):
    if x.ndim != 4:
        raise ValueError(f"conv input must be NCHW, got shape {x.shape}")
    if x.shape[1] != p.in_channels:
        raise ValueError(f"conv expects {p.in_channels} input channels, got {x.shape[1]}")


def _windows(x, k, pad):
    """View of shape (N, C, K, K, H', W') over the zero-padded input."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    h_out = x.shape[2] - k + 1
    w_out = x.shape[3] - k + 1
    return sliding_window_view(x, (h_out, w_out), axis=(2, 3))


def _chunks(n, hw):
    step = max(1, _COLS_PER_CHUNK // hw)
    for start in range(0, n, step):
        yield start, min(n, start + step)


def im2col(windows):
    """Unroll a (n, C, K, K, H', W') window view into (C*K*K, n*H'*W') columns."""
    n, c, k, _, h, w = windows.shape
    return windows.transpose(1, 2, 3, 0, 4, 5).reshape(c * k * k, n * h * w)


def conv2d_forward(x, p):
    """Cross-correlation with zero padding and stride 1, via im2col + matmul."""
    _check_conv_input(x, p)
    k = p.kernel_size
    win = _windows(x, k, p.padding)
    n, h, w = x.shape[0], win.shape[4], win.shape[5]
    cout = p.out_channels
    w_mat = p.weight.reshape(cout, -1)
    out = np.empty((n, cout, h, w), dtype=np.result_type(x, p.weight))
    for a, b in _chunks(n, h * w):
        y = matmul(w_mat, im2col(win[a:b]))
        out[a:b] = y.reshape(cout, b - a, h, w).transpose(1, 0, 2, 3)
    out += _per_channel(p.bias)
    return out


def conv2d_direct(x, p):
    """Reference convolution written as explicit loops over output cells.

    Slow; exists only as an independent oracle for the im2col path.
    """
    _check_conv_input(x, p)
    k, pad = p.kernel_size, p.padding
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    h_out, w_out = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    out = np.zeros((n, p.out_channels, h_out, w_out), dtype=np.float64)
    for i in range(n):
        for o in range(p.out_channels):
            for yy in range(h_out):
                for xx in range(w_out):
                    acc = float(p.bias[o])
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += float(p.weight[o, ci, ki, kj]) * xp[i, ci, yy + ki, xx + kj]
                    out[i, o, yy, xx] = acc
    return out


def conv2d_backward(x, p, dout):
    """Gradients of ``conv2d_forward`` w.r.t. input, weight and bias.

    The input gradient is itself a convolution of ``dout`` with the
    spatially flipped, channel-transposed kernel.
    """
    _check_conv_input(x, p)
    k, pad = p.kernel_size, p.padding
    n, h, w = x.shape[0], x.shape[2], x.shape[3]
    expected = (n, p.out_channels, h + 2 * pad - k + 1, w + 2 * pad - k + 1)
    if dout.shape != expected:
        raise ValueError(f"dout shape {dout.shape} does not match forward output {expected}")

    cout, cin = p.out_channels, p.in_channels
    win = _windows(x, k, pad)
    h_out, w_out = expected[2], expected[3]
    dw = np.zeros((cout, cin * k * k), dtype=np.result_type(x, dout))
    for a, b in _chunks(n, h_out * w_out):
        d = dout[a:b].transpose(1, 0, 2, 3).reshape(cout, -1)
        dw += matmul(d, im2col(win[a:b]).T)
    db = dout.sum(axis=(0, 2, 3))

    flipped = ConvParams(
        weight=np.ascontiguousarray(p.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)),
        bias=np.zeros(cin, dtype=p.weight.dtype),
        padding=k - 1 - pad,
    )
    dx = conv2d_forward(dout, flipped)
    return dx, dw.reshape(p.weight.shape), db


# --- batch normalization -------------------------------------------------


def batchnorm_forward(x, p, mode):
    """Normalize each channel, then scale by gamma and shift by beta.

    Train mode uses batch moments and folds them into the running stats
    (``running <- momentum * running + (1 - momentum) * batch``). Infer mode
    reads the running stats and changes nothing.
    """
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ValueError(f"batchnorm over {p.channels} channels got input {x.shape}")
    if mode == "train":
        mean, var = channel_moments(x)
        p.running_mean *= p.momentum
        p.running_mean += (1 - p.momentum) * mean
        p.running_var *= p.momentum
        p.running_var += (1 - p.momentum) * var
    elif mode == "infer":
        mean, var = p.running_mean, p.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    acc = np.promote_types(x.dtype, np.float64)
    inv_std = 1.0 / np.sqrt(var.astype(acc) + p.eps)
    if mode == "infer":
        # fold everything into one per-channel scale and shift
        scale = p.gamma * inv_std
        shift = p.beta - mean * scale
        out = x * _per_channel(scale.astype(x.dtype)) + _per_channel(shift.astype(x.dtype))
        return out, BatchNormCache(mode)
    inv_std = inv_std.astype(x.dtype)
    x_hat = (x - _per_channel(mean)) * _per_channel(inv_std)
    out = x_hat * _per_channel(p.gamma) + _per_channel(p.beta)
    return out, BatchNormCache(mode, x_hat, inv_std)


def batchnorm_backward(p, cache, dout):
    """Gradients of train-mode batchnorm, including the batch-moment terms."""
    if cache.mode != "train":
        raise ValueError("batchnorm_backward needs a cache from a train-mode forward")
    axes = (0, 2, 3)
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * cache.x_hat).sum(axis=axes)
    scale = _per_channel(p.gamma * cache.inv_std / m)
    dx = scale * (m * dout - _per_channel(dbeta) - cache.x_hat * _per_channel(dgamma))
    return dx, dgamma, dbeta


# --- activations and pooling ---------------------------------------------


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dout):
    # Derivative at exactly 0 is taken as 0.
    return np.where(x > 0, dout, 0).astype(dout.dtype, copy=False)


def maxpool2_forward(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"2x2 max-pooling needs even spatial extents, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, PoolCache(idx.astype(np.uint8), x.shape)


def maxpool2_backward(cache, dout):
    n, c, h, w = cache.input_shape
    if dout.shape != (n, c, h // 2, w // 2):
        raise ValueError("dout shape does not match the pooled output")
    routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(routed, cache.argmax[..., None].astype(np.intp), dout[..., None], axis=-1)
    routed = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return routed.reshape(n, c, h, w)


def global_avg_pool(x):
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(dout, input_shape):
    n, c, h, w = input_shape
    spread = (dout / (h * w)).astype(dout.dtype, copy=False)
    return np.broadcast_to(spread[:, :, None, None], input_shape).copy()


# --- unit cell -----------------------------------------------------------


@dataclass
class CellCache:
    bn: BatchNormCache
    activated: np.ndarray  # relu output, i.e. the conv input


def unit_cell_forward(x, bn, conv, mode):
    """BatchNorm -> ReLU -> Conv."""
    y, bn_cache = batchnorm_forward(x, bn, mode)
    a = np.maximum(y, 0, out=y)  # relu, in place on the fresh BN output
    return conv2d_forward(a, conv), CellCache(bn_cache, a)


def unit_cell_backward(bn, conv, cache, dout):
    """Returns (dx, {"gamma", "beta", "weight", "bias"} gradients)."""
    da, dw, db = conv2d_backward(cache.activated, conv, dout)
    # relu output > 0 exactly where its input > 0
    dy = relu_backward(cache.activated, da)
    dx, dgamma, dbeta = batchnorm_backward(bn, cache.bn, dy)
    return dx, {"gamma": dgamma, "beta": dbeta, "weight": dw, "bias": db}
