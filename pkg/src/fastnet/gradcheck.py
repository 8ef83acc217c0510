"""Central-difference gradient checks for every backward kernel.

Everything here runs in float64; the kernels are dtype-generic so the same
code paths that train in float32 are the ones being checked.
"""

import copy

import numpy as np

from . import layers
from .layers import BatchNormParams, ConvParams
from .network import ArchitectureSpec, build_model, network_backward, network_forward
from .tensor_core import SHADOW_DTYPE, NonFiniteError, make_rng
from .training import softmax_cross_entropy

TOLERANCE = 1e-4
MIN_COORDS = 200


def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)


def grad_check(loss_fn, tensors, grads, coords=MIN_COORDS, seed=0):
    """Largest relative error between ``grads`` and central differences.

    ``tensors`` maps names to float64 arrays that ``loss_fn()`` reads; they
    are perturbed in place and restored. Each tensor gets ``coords``
    sampled coordinates (all of them when it is smaller). The step is
    ``1e-5 * max(1, |theta|)``. Returns ``(max_error, {name: max_error})``.
    """
    rng = make_rng(seed)
    per_tensor = {}
    for name, t in tensors.items():
        if np.finfo(t.dtype).eps > np.finfo(SHADOW_DTYPE).eps:
            raise TypeError(f"grad_check needs at least float64; {name} is {t.dtype}")
        flat, g = t.reshape(-1), np.asarray(grads[name]).reshape(-1)
        if not t.flags.c_contiguous:
            raise ValueError(f"{name} must be contiguous so it can be perturbed in place")
        n = flat.size
        picks = np.arange(n) if n <= coords else rng.choice(n, size=coords, replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            h = 1e-5 * max(1.0, abs(orig))
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2 * h)
            worst = max(worst, float(relative_error(g[i], numeric)))
        per_tensor[name] = worst
    return max(per_tensor.values(), default=0.0), per_tensor


def _projection(shape, rng):
    return rng.standard_normal(shape)


def check_conv(kernel=3, seed=1, coords=MIN_COORDS):
    rng = make_rng(seed)
    x = rng.standard_normal((2, 3, 5, 5))
    p = ConvParams(rng.standard_normal((4, 3, kernel, kernel)), rng.standard_normal(4), (kernel - 1) // 2)
    r = _projection((2, 4, 5, 5), rng)
    dx, dw, db = layers.conv2d_backward(x, p, r)
    loss = lambda: float(np.sum(r * layers.conv2d_forward(x, p)))
    return grad_check(loss, {"x": x, "weight": p.weight, "bias": p.bias}, {"x": dx, "weight": dw, "bias": db}, coords)


def check_batchnorm(seed=2, coords=MIN_COORDS):
    rng = make_rng(seed)
    x = rng.standard_normal((3, 4, 4, 4)) * 2 + 0.5
    p = BatchNormParams.fresh(4, SHADOW_DTYPE)
    p.gamma[:] = rng.uniform(0.5, 1.5, 4)
    p.beta[:] = rng.standard_normal(4)
    r = _projection(x.shape, rng)
    _, cache = layers.batchnorm_forward(x, copy.deepcopy(p), "train")
    dx, dgamma, dbeta = layers.batchnorm_backward(p, cache, r)
    loss = lambda: float(np.sum(r * layers.batchnorm_forward(x, copy.deepcopy(p), "train")[0]))
    return grad_check(loss, {"x": x, "gamma": p.gamma, "beta": p.beta}, {"x": dx, "gamma": dgamma, "beta": dbeta}, coords)


def check_relu(seed=3, coords=MIN_COORDS):
    rng = make_rng(seed)
    # keep inputs away from the kink at 0
    x = rng.uniform(0.1, 1.0, (2, 3, 4, 4)) * rng.choice([-1.0, 1.0], (2, 3, 4, 4))
    r = _projection(x.shape, rng)
    dx = layers.relu_backward(x, r)
    return grad_check(lambda: float(np.sum(r * layers.relu(x))), {"x": x}, {"x": dx}, coords)


def check_maxpool(seed=4, coords=MIN_COORDS):
    rng = make_rng(seed)
    x = rng.standard_normal((2, 3, 6, 6))
    r = _projection((2, 3, 3, 3), rng)
    _, cache = layers.maxpool2_forward(x)
    dx = layers.maxpool2_backward(cache, r)
    return grad_check(lambda: float(np.sum(r * layers.maxpool2_forward(x)[0])), {"x": x}, {"x": dx}, coords)


def check_gap(seed=5, coords=MIN_COORDS):
    rng = make_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    r = _projection((2, 3), rng)
    dx = layers.global_avg_pool_backward(r, x.shape)
    return grad_check(lambda: float(np.sum(r * layers.global_avg_pool(x))), {"x": x}, {"x": dx}, coords)


def check_unit_cell(seed=6, coords=MIN_COORDS):
    rng = make_rng(seed)
    x = rng.standard_normal((2, 3, 5, 5))
    bn = BatchNormParams.fresh(3, SHADOW_DTYPE)
    bn.gamma[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta[:] = rng.standard_normal(3) * 0.1
    conv = ConvParams(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4), 1)
    r = _projection((2, 4, 5, 5), rng)
    _, cache = layers.unit_cell_forward(x, copy.deepcopy(bn), conv, "train")
    dx, g = layers.unit_cell_backward(bn, conv, cache, r)
    loss = lambda: float(np.sum(r * layers.unit_cell_forward(x, copy.deepcopy(bn), conv, "train")[0]))
    tensors = {"x": x, "gamma": bn.gamma, "beta": bn.beta, "weight": conv.weight, "bias": conv.bias}
    return grad_check(loss, tensors, {"x": dx, **g}, coords)


def check_softmax_ce(seed=7, coords=MIN_COORDS):
    rng = make_rng(seed)
    logits = rng.standard_normal((4, 5)) * 2
    labels = rng.integers(0, 5, 4)
    _, d = softmax_cross_entropy(logits, labels)
    return grad_check(lambda: softmax_cross_entropy(logits, labels)[0], {"logits": logits}, {"logits": d}, coords)


TINY_SPEC = ArchitectureSpec(groups=((4, 6),), head=(5, 3), num_classes=3, input_size=8)


def check_network(spec=TINY_SPEC, seed=8, coords=MIN_COORDS):
    """End-to-end check of ``network_backward`` through softmax cross-entropy."""
    model = build_model(spec, seed=seed).astype(SHADOW_DTYPE)
    rng = make_rng(seed, 1)
    x = rng.standard_normal((2, spec.in_channels, spec.input_size, spec.input_size))
    labels = rng.integers(0, spec.num_classes, 2)
    # Randomize gamma/beta/bias so no gradient is trivially zero.
    for cell in model.cells:
        cell.conv.bias[:] = rng.standard_normal(cell.conv.bias.shape) * 0.1
        if cell.bn is not None:
            cell.bn.gamma[:] = rng.uniform(0.5, 1.5, cell.bn.gamma.shape)
            cell.bn.beta[:] = rng.standard_normal(cell.bn.beta.shape) * 0.1

    logits, cache = network_forward(model, x, "train")
    _, dlogits = softmax_cross_entropy(logits, labels)
    grads = network_backward(model, cache, dlogits)

    # Conv biases that feed a BN have an exactly zero gradient (BN removes
    # per-channel shifts), so the central difference of a float64 loss is
    # pure roundoff, ~1e-11, which the 1e-8 floor turns into a 1e-3 error.
    # The numeric side therefore runs in extended precision.
    wide = model.astype(np.longdouble)
    x_wide = x.astype(np.longdouble)

    # Train-mode outputs ignore the running stats, so letting each call
    # update them does not affect the loss.
    def loss():
        logits, _ = network_forward(wide, x_wide, "train")
        return softmax_cross_entropy(logits, labels)[0]

    return grad_check(loss, dict(wide.named_parameters()), grads, coords)


SUITE = {
    "conv3x3": lambda coords: check_conv(3, coords=coords),
    "conv1x1": lambda coords: check_conv(1, seed=11, coords=coords),
    "batchnorm": lambda coords: check_batchnorm(coords=coords),
    "relu": lambda coords: check_relu(coords=coords),
    "maxpool2": lambda coords: check_maxpool(coords=coords),
    "global_avg_pool": lambda coords: check_gap(coords=coords),
    "unit_cell": lambda coords: check_unit_cell(coords=coords),
    "softmax_cross_entropy": lambda coords: check_softmax_ce(coords=coords),
    "network": lambda coords: check_network(coords=coords),
}


def run_suite(coords=MIN_COORDS):
    """Max relative error per layer type, in a fixed order."""
    return {name: check(coords)[0] for name, check in SUITE.items()}
