"""Receptive-field arithmetic for layer stacks.

The cumulative receptive field after ``L`` layers is

    r = sum_l (k_l - 1) * prod_{i<l} s_i + 1

with every dilated kernel replaced by its effective size ``a*(k-1) + 1``.
Padding does not enter: the receptive field is a support size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("conv", "atrous_conv", "pool")


@dataclass(frozen=True)
class RFLayer:
    name: str
    kind: str
    kernel: int
    stride: int = 1
    dilation: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kernel < 1 or self.stride < 1 or self.dilation < 1:
            raise ValueError(f"{self.name}: kernel, stride and dilation must be >= 1")


@dataclass(frozen=True)
class RFRow:
    name: str
    effective_kernel: int
    effective_stride: int  # product of the strides of all preceding layers
    receptive_field: int


def effective_kernel(k: int, dilation: int) -> int:
    if k < 1 or dilation < 1:
        raise ValueError("k and dilation must be >= 1")
    return dilation * (k - 1) + 1


def receptive_field(layers) -> list[RFRow]:
    layers = list(layers)
    if not layers:
        raise ValueError("empty layer list")
    rows, r, jump = [], 1, 1
    for layer in layers:
        k = effective_kernel(layer.kernel, layer.dilation)
        r += (k - 1) * jump
        rows.append(RFRow(layer.name, k, jump, r))
        jump *= layer.stride
    return rows


def spec_rf_layers(spec) -> list[RFLayer]:
    """Encoder layers along the longest path (squeeze 3x3 then the atrous branch)."""
    layers = [RFLayer("conv1", "conv", 3, spec.conv1_stride)]
    if "conv1" in spec.pool_after:
        layers.append(RFLayer("pool_conv1", "pool", 2, 2))
    for i, cfg in enumerate(spec.asb_configs, 1):
        name = f"ASBL{i}"
        layers.append(RFLayer(f"{name}.squeeze", "conv", 3))
        if cfg.ase3x3 > 0:
            kind = "atrous_conv" if cfg.dilation > 1 else "conv"
            layers.append(RFLayer(f"{name}.ase3x3", kind, 3, 1, cfg.dilation))
        else:
            layers.append(RFLayer(f"{name}.se3x3", "conv", 3))
        if name in spec.pool_after:
            layers.append(RFLayer(f"pool_{name}", "pool", 2, 2))
    return layers


def stage_stack(dilations, stride=1) -> list[RFLayer]:
    """Plain stack of ASB-like stages (squeeze 3x3 + dilated 3x3) at a fixed stride."""
    layers = []
    for i, d in enumerate(dilations, 1):
        layers.append(RFLayer(f"S{i}.squeeze", "conv", 3, 1))
        layers.append(RFLayer(f"S{i}.ase3x3", "atrous_conv" if d > 1 else "conv", 3, stride, d))
    return layers


@dataclass
class LinearityReport:
    stages: list[str]
    increments: list[float]  # per-stage RF growth in units of the stage's input stride
    ratios: list[float]
    max_ratio: float
    spread: float  # largest over smallest increment
    near_linear: bool
    ratio_threshold: float


def linearity_report(trace: list[RFRow], ratio_threshold: float = 2.0) -> LinearityReport:
    """Judge whether per-stage receptive-field growth is close to linear.

    Stages are groups of rows sharing a name prefix before the first dot
    (pooling rows attach to the stage that follows them).  Each stage's growth
    is measured in pixels of its own input feature map, so a stride change
    does not by itself count as acceleration.  The stack is near-linear when
    every successive growth ratio is at most ``ratio_threshold`` and the
    largest growth is at most ``n`` times the smallest over ``n`` stages --
    linear growth from ``g`` reaches at most ``n*g``; doubling does not.
    """
    if len(trace) < 3:
        raise ValueError("need a trace of at least 3 layers")
    stages, pending = [], 0.0
    for row in trace:
        growth = (row.effective_kernel - 1) * row.effective_stride
        if "." not in row.name:
            # standalone layers are not stages; pools between stages fold into the next one
            if stages:
                pending += growth
            continue
        prefix = row.name.split(".", 1)[0]
        if not stages or stages[-1][0] != prefix:
            stages.append([prefix, row.effective_stride, pending])
            pending = 0.0
        stages[-1][2] += growth
    names = [s[0] for s in stages]
    incs = [s[2] / s[1] for s in stages]
    ratios = [b / a for a, b in zip(incs, incs[1:])]
    max_ratio = max(ratios) if ratios else 1.0
    spread = max(incs) / min(incs) if incs and min(incs) > 0 else float("inf")
    near = max_ratio <= ratio_threshold and spread <= len(incs)
    return LinearityReport(names, incs, ratios, max_ratio, spread, near, ratio_threshold)


def format_table(trace: list[RFRow]) -> str:
    lines = [f"{'layer':<16}{'k_eff':>7}{'S_l':>6}{'r':>7}"]
    lines += [f"{r.name:<16}{r.effective_kernel:>7}{r.effective_stride:>6}{r.receptive_field:>7}"
              for r in trace]
    return "\n".join(lines)


def support_extent(grad: np.ndarray) -> int:
    """Width of the bounding interval of nonzero entries along the last axis."""
    nz = np.flatnonzero(np.any(grad.reshape(-1, grad.shape[-1]) != 0, axis=0))
    return 0 if nz.size == 0 else int(nz[-1] - nz[0] + 1)
