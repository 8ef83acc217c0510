"""Dense tensor helpers shared by every layer kernel.

Tensors are plain ``numpy.ndarray`` objects in NCHW order (weights in
(Cout, Cin, Kh, Kw) order). Production paths use float32; the gradient
checker feeds float64 arrays through the same kernels.

Randomness comes from numpy's Philox generator, a counter-based bit
generator whose stream depends only on its key, so a given seed produces
the same values on every platform numpy supports.
"""

import numpy as np

DTYPE = np.float32
SHADOW_DTYPE = np.float64


class NonFiniteError(ArithmeticError):
    """Raised when a tensor picks up NaN or Inf."""


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 4:
        raise ValueError(f"tensors have 1 to 4 axes, got shape {shape}")
    if any(s < 1 for s in shape):
        raise ValueError(f"every extent must be >= 1, got shape {shape}")
    return shape


def tensor_full(shape, value, dtype=DTYPE):
    return np.full(_check_shape(shape), value, dtype=dtype)


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def matmul(a, b):
    """Matrix product of an (M, K) and a (K, N) array.

    Delegates to BLAS. With a fixed BLAS thread count the result is
    bit-reproducible between runs; ``deterministic`` in the CLI pins that
    count to one.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def make_rng(seed, *stream):
    """Philox generator keyed by ``seed`` and optional stream ids.

    ``make_rng(seed, epoch, index)`` gives an independent stream per
    (epoch, index) pair, so results never depend on iteration order.
    """
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    ss = np.random.SeedSequence([seed, *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


def he_normal_init(shape, fan_in, rng, dtype=DTYPE):
    """Samples from N(0, 2 / fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be a positive integer")
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(_check_shape(shape)) * std).astype(dtype)


def channel_moments(x):
    """Per-channel mean and biased variance of an NCHW tensor.

    Accumulates in at least float64 so large batches don't lose precision,
    then returns values in the input dtype.
    """
    if x.ndim != 4:
        raise ValueError(f"expected an NCHW tensor, got shape {x.shape}")
    axes = (0, 2, 3)
    acc = np.promote_types(x.dtype, np.float64)
    mean = x.mean(axis=axes, dtype=acc)
    centered = x - mean.astype(x.dtype)[None, :, None, None]
    var = np.mean(np.square(centered, dtype=acc), axis=axes)
    return mean.astype(x.dtype), var.astype(x.dtype)
