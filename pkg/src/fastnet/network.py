"""FastNet construction, sequential forward/backward, and cost model."""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers
from .layers import BatchNormParams, ConvParams
from .tensor_core import DTYPE, NonFiniteError, channel_moments, he_normal_init, make_rng

DEFAULT_GROUPS = ((64, 128, 128, 128), (128, 128, 128), (128, 128, 128), (128, 128))
DEFAULT_HEAD_HIDDEN = (128, 128)


@dataclass(frozen=True)
class ArchitectureSpec:
    """Declarative layer list.

    ``groups`` holds the output widths of the 3x3 unit cells in each group;
    every group is followed by a 2x2 max-pool. ``head`` holds the widths of
    the 1x1 unit cells, the last of which must equal ``num_classes``.
    Global average pooling of the final cell gives the logits.
    """

    groups: tuple = DEFAULT_GROUPS
    head: tuple = DEFAULT_HEAD_HIDDEN + (10,)
    num_classes: int = 10
    in_channels: int = 3
    input_size: int = 32
    kernel: int = 3
    first_cell_plain_conv: bool = False
    conv_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(int(w) for w in g) for g in self.groups))
        object.__setattr__(self, "head", tuple(int(w) for w in self.head))
        for g in self.groups:
            if not g:
                raise ValueError("conv groups must hold at least one layer")
        if any(w < 1 for g in self.groups for w in g) or any(w < 1 for w in self.head):
            raise ValueError("layer widths must be positive")
        if self.kernel != 3:
            raise ValueError("group convolutions are 3x3")
        if self.head and self.head[-1] != self.num_classes:
            raise ValueError("the last head cell must have num_classes channels")
        if self.head and self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.input_size % (2 ** len(self.groups)):
            raise ValueError(f"input size {self.input_size} cannot be halved {len(self.groups)} times")

    def fingerprint(self):
        """64-bit digest of the architecture, used to validate model files."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def fastnet_spec(num_classes=10, **overrides):
    """The default FastNet: 12 3x3 cells in groups 4/3/3/2, then three 1x1 cells."""
    return ArchitectureSpec(head=DEFAULT_HEAD_HIDDEN + (num_classes,), num_classes=num_classes, **overrides)


@dataclass(frozen=True)
class LayerInfo:
    name: str
    kind: str  # "unit3x3", "unit1x1", "conv3x3", "maxpool2" or "gap"
    in_channels: int
    out_channels: int
    kernel: int
    out_size: int
    params: int
    macs: int

    @property
    def out_shape(self):
        if self.kind == "gap":
            return f"{self.out_channels}"
        return f"{self.out_channels}x{self.out_size}x{self.out_size}"


def layer_plan(spec):
    """Every layer of ``spec`` in execution order with its shape and cost."""
    plan = []
    c, size = spec.in_channels, spec.input_size
    n_conv = 0

    def add_conv(width, k):
        nonlocal c, n_conv
        n_conv += 1
        plain = n_conv == 1 and spec.first_cell_plain_conv
        params = width * c * k * k
        if spec.conv_bias:
            params += width
        if not plain:
            params += 2 * c
        kind = f"conv{k}x{k}" if plain else f"unit{k}x{k}"
        plan.append(LayerInfo(f"conv{n_conv:02d}", kind, c, width, k, size, params, width * c * k * k * size * size))
        c = width

    for gi, group in enumerate(spec.groups, start=1):
        for width in group:
            add_conv(width, spec.kernel)
        size //= 2
        plan.append(LayerInfo(f"pool{gi}", "maxpool2", c, c, 2, size, 0, 0))
    for width in spec.head:
        add_conv(width, 1)
    if plan:
        plan.append(LayerInfo("gap", "gap", c, c, size, 1, 0, 0))
    return plan


def count_params(spec):
    return sum(layer.params for layer in layer_plan(spec))


def count_macs(spec):
    return sum(layer.macs for layer in layer_plan(spec))


def inspect_report(spec):
    """Per-layer rows followed by a ``total`` row, as plain dicts."""
    rows = [
        {"layer": l.name, "type": l.kind, "out_shape": l.out_shape, "params": l.params, "macs": l.macs}
        for l in layer_plan(spec)
    ]
    rows.append(
        {"layer": "total", "type": "", "out_shape": "", "params": count_params(spec), "macs": count_macs(spec)}
    )
    return rows


# --- model state ---------------------------------------------------------


@dataclass
class Cell:
    name: str
    conv: ConvParams
    bn: BatchNormParams = None  # None for a plain first conv
    pool_after: bool = False


@dataclass
class ModelState:
    spec: ArchitectureSpec
    cells: list = field(default_factory=list)
    # Per-channel normalization the model was trained with; not learnable.
    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(3, DTYPE))
    input_std: np.ndarray = field(default_factory=lambda: np.ones(3, DTYPE))

    def named_parameters(self):
        """Learnable tensors in canonical order."""
        out = []
        for cell in self.cells:
            if cell.bn is not None:
                out.append((f"{cell.name}.bn.gamma", cell.bn.gamma))
                out.append((f"{cell.name}.bn.beta", cell.bn.beta))
            out.append((f"{cell.name}.conv.weight", cell.conv.weight))
            if self.spec.conv_bias:
                out.append((f"{cell.name}.conv.bias", cell.conv.bias))
        return out

    def state_dict(self):
        """All persisted tensors (parameters, BN running stats, input stats) in canonical order."""
        out = {"input.mean": self.input_mean, "input.std": self.input_std}
        for cell in self.cells:
            if cell.bn is not None:
                out[f"{cell.name}.bn.gamma"] = cell.bn.gamma
                out[f"{cell.name}.bn.beta"] = cell.bn.beta
                out[f"{cell.name}.bn.running_mean"] = cell.bn.running_mean
                out[f"{cell.name}.bn.running_var"] = cell.bn.running_var
            out[f"{cell.name}.conv.weight"] = cell.conv.weight
            if self.spec.conv_bias:
                out[f"{cell.name}.conv.bias"] = cell.conv.bias
        return out

    def load_state_dict(self, tensors):
        """Copy values into this model; names and shapes must match exactly."""
        own = self.state_dict()
        if list(own) != list(tensors):
            missing = sorted(set(own) - set(tensors))
            extra = sorted(set(tensors) - set(own))
            raise KeyError(f"tensor names differ (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, dst in own.items():
            src = np.asarray(tensors[name])
            if src.shape != dst.shape:
                raise ValueError(f"{name}: expected shape {dst.shape}, got {src.shape}")
            dst[...] = src

    def astype(self, dtype):
        """Deep copy with every tensor cast to ``dtype`` (float64 for grad checks)."""
        clone = copy.deepcopy(self)
        clone.input_mean = clone.input_mean.astype(dtype)
        clone.input_std = clone.input_std.astype(dtype)
        for cell in clone.cells:
            cell.conv.weight = cell.conv.weight.astype(dtype)
            cell.conv.bias = cell.conv.bias.astype(dtype)
            if cell.bn is not None:
                for attr in ("gamma", "beta", "running_mean", "running_var"):
                    setattr(cell.bn, attr, getattr(cell.bn, attr).astype(dtype))
        return clone

    def fingerprint(self):
        return self.spec.fingerprint()


def build_model(spec, seed=0, dtype=DTYPE):
    """Fresh model: he_normal conv weights, zero biases, gamma 1, beta 0."""
    if not spec.head:
        raise ValueError("a buildable spec needs at least one head cell")
    rng = make_rng(seed)
    model = ModelState(
        spec, input_mean=np.zeros(spec.in_channels, dtype), input_std=np.ones(spec.in_channels, dtype)
    )
    convs = [l for l in layer_plan(spec) if l.kind.startswith(("unit", "conv"))]
    pool_after = set()
    idx = 0
    for group in spec.groups:
        idx += len(group)
        pool_after.add(idx)
    for i, info in enumerate(convs, start=1):
        k = info.kernel
        fan_in = info.in_channels * k * k
        conv = ConvParams(
            weight=he_normal_init((info.out_channels, info.in_channels, k, k), fan_in, rng, dtype),
            bias=np.zeros(info.out_channels, dtype),
            padding=(k - 1) // 2,
        )
        bn = None if info.kind.startswith("conv") else BatchNormParams.fresh(info.in_channels, dtype)
        model.cells.append(Cell(info.name, conv, bn, i in pool_after))
    return model


def build_fastnet(num_classes=10, seed=0, **overrides):
    return build_model(fastnet_spec(num_classes, **overrides), seed)


# --- execution -----------------------------------------------------------


@dataclass
class ForwardCache:
    spec: ArchitectureSpec
    cells: list  # per cell: (layer cache, pool cache or None)
    gap_shape: tuple


def _cell_forward(cell, x, mode):
    if cell.bn is None:
        return layers.conv2d_forward(x, cell.conv), x
    return layers.unit_cell_forward(x, cell.bn, cell.conv, mode)


def network_forward(model, x, mode="infer"):
    """Logits (pre-softmax) for an NCHW batch.

    Returns ``(logits, cache)``; the cache is ``None`` in infer mode. Train
    mode updates the BN running statistics and nothing else.
    """
    spec = model.spec
    expected = (spec.in_channels, spec.input_size, spec.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"expected input of shape (N, {', '.join(map(str, expected))}), got {x.shape}")
    keep = mode == "train"
    caches = []
    for cell in model.cells:
        x, cell_cache = _cell_forward(cell, x, mode)
        pool_cache = None
        if cell.pool_after:
            x, pool_cache = layers.maxpool2_forward(x)
        if keep:
            caches.append((cell_cache, pool_cache))
    logits = layers.global_avg_pool(x)
    return logits, (ForwardCache(spec, caches, x.shape) if keep else None)


def predict_logits(model, x, batch_size=256):
    """Infer-mode logits, evaluated in slices of ``batch_size``."""
    out = [network_forward(model, x[i : i + batch_size], "infer")[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes), DTYPE)


def network_backward(model, cache, dlogits):
    """Gradients for every learnable tensor, keyed like ``named_parameters``."""
    if cache is None or cache.spec != model.spec or len(cache.cells) != len(model.cells):
        raise ValueError("backward needs the cache of a train-mode forward on this model")
    if dlogits.shape != cache.gap_shape[:2]:
        raise ValueError(f"dlogits shape {dlogits.shape} does not match logits {cache.gap_shape[:2]}")
    grads = {}
    d = layers.global_avg_pool_backward(dlogits, cache.gap_shape)
    for cell, (cell_cache, pool_cache) in zip(reversed(model.cells), reversed(cache.cells)):
        if pool_cache is not None:
            d = layers.maxpool2_backward(pool_cache, d)
        if cell.bn is None:
            d, dw, db = layers.conv2d_backward(cell_cache, cell.conv, d)
            g = {"weight": dw, "bias": db}
        else:
            d, g = layers.unit_cell_backward(cell.bn, cell.conv, cell_cache, d)
            grads[f"{cell.name}.bn.gamma"] = g["gamma"]
            grads[f"{cell.name}.bn.beta"] = g["beta"]
        grads[f"{cell.name}.conv.weight"] = g["weight"]
        if model.spec.conv_bias:
            grads[f"{cell.name}.conv.bias"] = g["bias"]
    return {name: grads[name] for name, _ in model.named_parameters()}


def locate_nonfinite(model, x, mode="train"):
    """Name of the first layer whose output is not finite, or None.

    Runs on a copy so BN running statistics are left untouched.
    """
    model = copy.deepcopy(model)
    if not np.all(np.isfinite(x)):
        return "input"
    for cell in model.cells:
        for name, t in ((f"{cell.name}.conv.weight", cell.conv.weight), (f"{cell.name}.conv.bias", cell.conv.bias)):
            if not np.all(np.isfinite(t)):
                return name
        x, _ = _cell_forward(cell, x, mode)
        if not np.all(np.isfinite(x)):
            return cell.name
        if cell.pool_after:
            x, _ = layers.maxpool2_forward(x)
    return None


def calibrate_bn(model, x):
    """Set every BN layer's running stats to the exact batch moments of ``x``.

    Afterwards infer mode on ``x`` reproduces train mode on ``x``.
    """
    for cell in model.cells:
        if cell.bn is not None:
            mean, var = channel_moments(x)
            cell.bn.running_mean[...] = mean
            cell.bn.running_var[...] = var
        x, _ = _cell_forward(cell, x, "infer")
        if cell.pool_after:
            x, _ = layers.maxpool2_forward(x)
    return model


def check_model_finite(model):
    for name, t in model.state_dict().items():
        if not np.all(np.isfinite(t)):
            raise NonFiniteError(f"{name} contains NaN or Inf")
