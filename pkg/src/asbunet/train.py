"""Momentum-SGD training with step-decayed learning rate and weighted BCE."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import numpy as np

from . import ops
from .data import augment, stack

log = logging.getLogger(__name__)

LR_FLOOR = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    momentum: float = 0.9
    lr_init: float = 1e-2
    lr_step_fraction: float = 0.3
    lr_factor: float = 0.1
    l2: float = 1e-12
    batch_size: int = 8
    epochs: int = 20
    pos_weight: float | None = None  # None: per-batch background/foreground ratio, clamped to [1, 20]
    split: float = 0.8
    seed: int = 0
    augment: bool = True
    clip_norm: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.lr_step_fraction <= 0:
            raise ValueError("lr_step_fraction must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie in (0, 1)")
        if self.pos_weight is not None and self.pos_weight <= 0:
            raise ValueError("pos_weight must be positive")

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse flat ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            kw[key] = _parse_value(key, value, types[key])
        return cls(**kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _parse_value(key, value, typ):
    if typ == "bool":
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: not a boolean: {value!r}")
        return value.lower() in ("true", "1", "yes")
    if value.lower() == "none" and "None" in typ:
        return None
    if ":" in value and key == "split":
        a, b = (float(v) for v in value.split(":"))
        return a / (a + b)
    if typ == "int":
        return int(value)
    return float(value)


def decay_interval(cfg: TrainConfig, steps_per_epoch: int) -> int:
    return max(1, math.floor(cfg.lr_step_fraction * steps_per_epoch))


def learning_rate(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Learning rate for 0-based ``step``: multiplied by ``lr_factor`` every interval."""
    k = step // decay_interval(cfg, steps_per_epoch)
    return max(cfg.lr_init * cfg.lr_factor ** k, LR_FLOOR)


def split_dataset(data, ratio=0.8, seed=0):
    """Shuffle with ``seed`` and cut into (train, test); ``ratio`` is the train fraction
    or an ``(a, b)`` pair such as ``(80, 20)``."""
    data = list(data)
    if len(data) < 2:
        raise ValueError("need at least two samples to split")
    if isinstance(ratio, (tuple, list)):
        ratio = ratio[0] / (ratio[0] + ratio[1])
    n_train = min(max(int(round(ratio * len(data))), 1), len(data) - 1)
    order = np.random.default_rng(seed).permutation(len(data))
    return [data[i] for i in order[:n_train]], [data[i] for i in order[n_train:]]


def batch_pos_weight(labels, cfg: TrainConfig) -> float:
    if cfg.pos_weight is not None:
        return cfg.pos_weight
    fg = float(np.sum(labels))
    bg = labels.size - fg
    return float(np.clip(bg / max(fg, 1.0), 1.0, 20.0))


class MomentumSGD:
    """v <- momentum*v - lr*(grad + l2*w);  w <- w + v."""

    def __init__(self, params, momentum=0.9, l2=0.0):
        self.params = list(params)
        self.momentum, self.l2 = momentum, l2
        self.velocity = [np.zeros_like(p.values) for p in self.params]

    def step(self, lr: float):
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v -= lr * (p.grad + self.l2 * p.values)
            p.values += v


def clip_gradients(params, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm and norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


def train_step(net, x, y, pos_weight):
    net.zero_grad()
    logits = net.forward_logits(x, training=True)
    loss, grad = ops.weighted_bce_with_logits(logits, y, pos_weight)
    net.backward(grad)
    return loss


def train(net, data, cfg: TrainConfig, log_file=None, progress=None):
    """Train in place; returns ``(net, history)`` with history rows ``(step, lr, loss, epoch)``."""
    data = list(data)
    if not data:
        raise ValueError("no training data")
    params = [p for _, p in net.named_params()]
    opt = MomentumSGD(params, cfg.momentum, cfg.l2)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = [augment(data[i], [cfg.seed, epoch, int(i)]) if cfg.augment else data[i]
                     for i in idx]
            x, y = stack(batch)
            lr = learning_rate(cfg, step, steps_per_epoch)
            loss = train_step(net, x, y, batch_pos_weight(y, cfg))
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at step {step} (epoch {epoch}, lr {lr:g})")
            clip_gradients(params, cfg.clip_norm)
            opt.step(lr)
            # weights are stored in single precision, arithmetic stays double
            net.snap_to_float32()
            history.append((step, lr, loss, epoch))
            if log_file is not None:
                log_file.write(f"{step},{lr:.6g},{loss:.8g}\n")
            step += 1
        mean = float(np.mean([h[2] for h in history if h[3] == epoch]))
        log.info("epoch %d: mean loss %.5f, lr %.3g", epoch, mean, lr)
        if progress is not None:
            progress(epoch, mean)
    return net, history


def epoch_means(history) -> list[float]:
    epochs = sorted({h[3] for h in history})
    return [float(np.mean([h[2] for h in history if h[3] == e])) for e in epochs]


def predict(net, images, batch_size=8) -> np.ndarray:
    """Sigmoid probabilities ``(N, H, W)`` in inference mode."""
    images = np.asarray(images)
    out = [net.forward(images[i:i + batch_size])[:, 0] for i in range(0, len(images), batch_size)]
    return np.concatenate(out)
