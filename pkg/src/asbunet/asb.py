"""The Atrous Space Bender layer.

A 3x3 squeeze convolution feeds three parallel branches (1x1 expand, 3x3
spatial expand, dilated 3x3 spatial expand) whose outputs are concatenated
in that order.  Every sub-convolution is conv -> [BN] -> ReLU.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .layers import ConvUnit, Module


@dataclass(frozen=True)
class ASBLayerConfig:
    ss3x3: int
    e1x1: int
    se3x3: int
    ase3x3: int
    dilation: int = 1
    use_batchnorm: bool = True

    def __post_init__(self):
        counts = (self.ss3x3, self.e1x1, self.se3x3, self.ase3x3)
        if any(c < 0 for c in counts) or self.ss3x3 < 1:
            raise ValueError(f"invalid filter counts {counts}")
        if self.ss3x3 >= self.expand:
            raise ValueError(f"squeeze:expand ratio must stay below 1 ({self.ss3x3}:{self.expand})")
        if self.se3x3 + self.ase3x3 < 1:
            raise ValueError("at least one spatial expand branch needs filters")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")

    @property
    def expand(self) -> int:
        return self.e1x1 + self.se3x3 + self.ase3x3

    def to_dict(self):
        return asdict(self)


def asb_param_count(cfg: ASBLayerConfig, in_channels: int) -> int:
    """Weights plus biases of one layer, batch-norm parameters excluded."""
    ss = cfg.ss3x3
    return (ss * (9 * in_channels + 1) + cfg.e1x1 * (ss + 1)
            + cfg.se3x3 * (9 * ss + 1) + cfg.ase3x3 * (9 * ss + 1))


class ASBLayer(Module):
    def __init__(self, name, in_channels, cfg: ASBLayerConfig, rng=None):
        self.name = name
        self.cfg = cfg
        self.in_channels = in_channels
        bn = cfg.use_batchnorm
        self.squeeze = ConvUnit("squeeze", in_channels, cfg.ss3x3, 3, batchnorm=bn, rng=rng)
        self.branches = []
        for bname, n, k, d in (("e1x1", cfg.e1x1, 1, 1), ("se3x3", cfg.se3x3, 3, 1),
                               ("ase3x3", cfg.ase3x3, 3, cfg.dilation)):
            if n > 0:
                self.branches.append(ConvUnit(bname, cfg.ss3x3, n, k, dilation=d,
                                              batchnorm=bn, rng=rng))

    @property
    def out_channels(self) -> int:
        return self.cfg.expand

    def children(self):
        return [self.squeeze, *self.branches]

    def forward(self, x, training=False, hook=None):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} channels, got {x.shape[1]}")
        s = self.squeeze.forward(x, training, hook)
        return ops.concat_channels([b.forward(s, training, hook) for b in self.branches])

    def backward(self, grad):
        parts = ops.split_channels(grad, [b.out_ch for b in self.branches])
        g_squeeze = sum(b.backward(g) for b, g in zip(self.branches, parts))
        return self.squeeze.backward(g_squeeze)


def asb_forward(x, cfg: ASBLayerConfig, weights: dict[str, np.ndarray], training=False):
    """Functional form: run one layer with explicit weights.

    ``weights`` maps qualified parameter names (``squeeze.weight``,
    ``ase3x3.bias``, ...) to arrays; every parameter of the layer must be given.
    """
    x = np.asarray(x)
    layer = ASBLayer("asb", x.shape[1], cfg)
    params = dict(layer.named_params())
    missing = set(params) - set(weights)
    if missing:
        raise ValueError(f"missing weights: {sorted(missing)}")
    for name, p in params.items():
        w = np.asarray(weights[name], dtype=np.float64)
        if w.shape != p.values.shape:
            raise ValueError(f"{name}: shape {w.shape} != expected {p.values.shape}")
        p.values[...] = w
    return layer.forward(x, training)
