"""Loss, Adam, learning-rate schedule and the training loop."""

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import make_batches
from .network import locate_nonfinite, network_backward, network_forward, predict_logits
from .tensor_core import NonFiniteError

log = logging.getLogger(__name__)


class NonFiniteLossError(NonFiniteError):
    def __init__(self, epoch, step, layer):
        self.epoch, self.step, self.layer = epoch, step, layer
        where = f"first non-finite output at {layer}" if layer else "no layer output was non-finite"
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}; {where}")


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean of -log(softmax(logits)[label]) over the batch, and its gradient.

    The loss is a numpy scalar in the logits' dtype.
    """
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_sum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(log_sum - z[rows, labels])
    dlogits = np.exp(z - log_sum[:, None])
    dlogits[rows, labels] -= 1
    dlogits /= n
    return loss, dlogits.astype(logits.dtype, copy=False)


# --- optimizer -----------------------------------------------------------


@dataclass(frozen=True)
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, named_params):
        return cls(
            m={k: np.zeros_like(p) for k, p in named_params},
            v={k: np.zeros_like(p) for k, p in named_params},
        )


def adam_update(param, grad, m, v, t, lr, hyper=AdamHyper()):
    """In-place Adam update of ``param``, ``m`` and ``v`` for step ``t`` (1-based)."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}")
    b1, b2 = hyper.beta1, hyper.beta2
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * np.square(grad)
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + hyper.eps)).astype(param.dtype, copy=False)
    return param


def adam_step(named_params, grads, state, lr, hyper=AdamHyper()):
    """One optimizer step over every parameter; advances ``state.t`` once."""
    state.t += 1
    for name, p in named_params:
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        adam_update(p, grads[name], state.m[name], state.v[name], state.t, lr, hyper)


# --- schedule and config -------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    milestones: tuple = (80, 120, 160, 180)
    decay_factor: float = 0.1
    epochs: int = 200
    batch_size: int = 128
    seed: int = 0
    adam: AdamHyper = AdamHyper()
    augment: bool = True
    # Measure train accuracy with an infer-mode pass over the train split
    # instead of from the train-mode predictions made during the epoch.
    eval_train: bool = False

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing")
        if ms and (ms[0] < 0 or ms[-1] >= self.epochs):
            # Schedules for short runs simply never reach the later milestones.
            object.__setattr__(self, "milestones", tuple(m for m in ms if 0 <= m < self.epochs))


def lr_at_epoch(epoch, config):
    """``lr0 * decay_factor ** k`` with k the number of milestones <= epoch."""
    crossed = sum(1 for m in config.milestones if m <= epoch)
    return config.lr0 * config.decay_factor**crossed


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float
    seconds: float

    def to_json(self):
        return asdict(self)


# --- evaluation and loop -------------------------------------------------


def accuracy(logits, labels):
    # argmax returns the lowest index on ties
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def evaluate(model, images, labels, batch_size=256):
    """Infer-mode top-1 accuracy; ``images`` is a normalized NCHW array."""
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return accuracy(predict_logits(model, images, batch_size), labels)


def fit(model, train, test, config, on_epoch=None, adam_state=None, stop=None):
    """Train ``model`` in place.

    ``train`` and ``test`` are ``data.Split`` objects already carrying their
    normalization stats. ``on_epoch`` is called with each ``EpochMetrics``
    as soon as the epoch finishes; training ends early after the first epoch
    for which ``stop(metrics)`` is true. Returns ``(model, history)``.
    """
    if len(train) == 0 or len(test) == 0:
        raise ValueError("train and test splits must be non-empty")
    params = model.named_parameters()
    state = adam_state if adam_state is not None else AdamState.zeros_like(params)
    test_images = test.images()
    history = []
    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = lr_at_epoch(epoch, config)
        loss_sum, correct, seen = 0.0, 0, 0
        batches = make_batches(train, config.batch_size, seed=config.seed, epoch=epoch, augment=config.augment)
        for step, (x, y) in enumerate(batches):
            logits, cache = network_forward(model, x, "train")
            loss, dlogits = softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise NonFiniteLossError(epoch, step, locate_nonfinite(model, x))
            grads = network_backward(model, cache, dlogits)
            del cache
            adam_step(params, grads, state, lr, config.adam)
            loss_sum += float(loss) * len(y)
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
            seen += len(y)
        train_acc = evaluate(model, train.images(), train.labels) if config.eval_train else correct / seen
        metrics = EpochMetrics(
            epoch=epoch,
            lr=lr,
            train_loss=loss_sum / seen,
            train_acc=train_acc,
            test_acc=evaluate(model, test_images, test.labels),
            seconds=time.perf_counter() - start,
        )
        log.info(
            "epoch %d lr %.2e loss %.4f train %.4f test %.4f (%.1fs)",
            epoch, lr, metrics.train_loss, metrics.train_acc, metrics.test_acc, metrics.seconds,
        )
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
        if stop is not None and stop(metrics):
            break
    return model, history
