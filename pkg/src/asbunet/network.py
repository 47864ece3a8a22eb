"""ASB-Net encoder and ASBU-Net decoder built from a declarative spec."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .asb import ASBLayer, ASBLayerConfig, asb_param_count
from .layers import ConvUnit, MaxPool, Module

ASB_NAMES = tuple(f"ASBL{i}" for i in range(1, 8))
POOL_PLACEMENT = {
    "1/16": ("conv1", "ASBL3", "ASBL5"),
    "1/8": ("conv1", "ASBL3"),
}
DEFAULT_DILATIONS = (1, 2, 3, 4, 3, 2, 1)
DEFAULT_EXPAND = (32, 48, 48, 64, 64, 96, 96)
# per skip source: (skip projection filters, merge filters, long-connect ASB config)
DEFAULT_LONGCONNECT = {
    "ASBL5": (16, 32, ASBLayerConfig(16, 16, 8, 8, 1)),
    "ASBL3": (16, 24, ASBLayerConfig(12, 12, 6, 6, 1)),
    "conv1": (16, 16, ASBLayerConfig(8, 8, 4, 4, 1)),
}


@dataclass(frozen=True)
class DecoderStageSpec:
    skip_source: str
    skip_proj_filters: int
    merge_filters: int
    asb: ASBLayerConfig

    def __post_init__(self):
        if self.asb.dilation != 1:
            raise ValueError(f"long-connect ASB layer for {self.skip_source} must have dilation 1")
        if self.skip_proj_filters < 1 or self.merge_filters < 1:
            raise ValueError("filter counts must be >= 1")


@dataclass(frozen=True)
class DecoderSpec:
    """Long-connect stages ordered from the deepest skip to the shallowest."""

    stages: tuple[DecoderStageSpec, ...]
    head: tuple[int, int] = (16, 1)

    @property
    def skip_sources(self):
        return tuple(s.skip_source for s in self.stages)


@dataclass(frozen=True)
class NetworkSpec:
    scaling: str
    asb_configs: tuple[ASBLayerConfig, ...]
    decoder: DecoderSpec
    input_channels: int = 3
    conv1_filters: int = 16
    conv1_stride: int = 2
    use_batchnorm: bool = True
    pool_after: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.scaling not in POOL_PLACEMENT:
            raise ValueError(f"scaling must be one of {sorted(POOL_PLACEMENT)}, got {self.scaling!r}")
        if not self.pool_after:
            object.__setattr__(self, "pool_after", POOL_PLACEMENT[self.scaling])
        if tuple(self.pool_after) != POOL_PLACEMENT[self.scaling]:
            raise ValueError(f"{self.scaling} scaling requires pooling after "
                             f"{POOL_PLACEMENT[self.scaling]}, got {self.pool_after}")
        if len(self.asb_configs) != 7:
            raise ValueError(f"the encoder has exactly 7 ASB layers, got {len(self.asb_configs)}")
        if self.decoder.skip_sources != tuple(reversed(self.pool_after)):
            raise ValueError("decoder needs one long-connect stage per pooling step, deepest first: "
                             f"expected {tuple(reversed(self.pool_after))}, got {self.decoder.skip_sources}")
        if self.conv1_stride not in (1, 2):
            raise ValueError("conv1 stride must be 1 or 2")

    @property
    def downsampling(self) -> int:
        return self.conv1_stride * 2 ** len(self.pool_after)

    def to_dict(self) -> dict:
        return {
            "scaling": self.scaling,
            "input_channels": self.input_channels,
            "conv1_filters": self.conv1_filters,
            "conv1_stride": self.conv1_stride,
            "use_batchnorm": self.use_batchnorm,
            "pool_after": list(self.pool_after),
            "asb_configs": [c.to_dict() for c in self.asb_configs],
            "decoder": {
                "head": list(self.decoder.head),
                "stages": [{"skip_source": s.skip_source,
                            "skip_proj_filters": s.skip_proj_filters,
                            "merge_filters": s.merge_filters,
                            "asb": s.asb.to_dict()} for s in self.decoder.stages],
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        dec = d["decoder"]
        stages = tuple(DecoderStageSpec(s["skip_source"], s["skip_proj_filters"],
                                        s["merge_filters"], ASBLayerConfig(**s["asb"]))
                       for s in dec["stages"])
        return cls(scaling=d["scaling"],
                   asb_configs=tuple(ASBLayerConfig(**c) for c in d["asb_configs"]),
                   decoder=DecoderSpec(stages, tuple(dec["head"])),
                   input_channels=d["input_channels"], conv1_filters=d["conv1_filters"],
                   conv1_stride=d["conv1_stride"], use_batchnorm=d["use_batchnorm"],
                   pool_after=tuple(d["pool_after"]))

    def dumps(self) -> str:
        """Canonical text form (sorted keys, no whitespace)."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def loads(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))


def build_default_spec(scaling: str = "1/16", dilations=DEFAULT_DILATIONS,
                       expand=DEFAULT_EXPAND, use_batchnorm=True) -> NetworkSpec:
    """Pinned defaults: rise-then-fall dilations, squeeze = half the expand
    total, expand split 2:1:1 across (e1x1, se3x3, ase3x3)."""
    if scaling not in POOL_PLACEMENT:
        raise ValueError(f"scaling must be one of {sorted(POOL_PLACEMENT)}")
    configs = tuple(ASBLayerConfig(e // 2, e // 2, e // 4, e - e // 2 - e // 4, d, use_batchnorm)
                    for e, d in zip(expand, dilations))
    stages = []
    for src in reversed(POOL_PLACEMENT[scaling]):
        proj, merge, asb = DEFAULT_LONGCONNECT[src]
        asb = ASBLayerConfig(asb.ss3x3, asb.e1x1, asb.se3x3, asb.ase3x3, 1, use_batchnorm)
        stages.append(DecoderStageSpec(src, proj, merge, asb))
    return NetworkSpec(scaling, configs, DecoderSpec(tuple(stages)), use_batchnorm=use_batchnorm)


def spec_param_count(spec: NetworkSpec) -> int:
    """Trainable parameter count worked out from a NetworkSpec alone (weights, biases
    and batch-norm affine terms), without building the network."""
    bn = 2 if spec.use_batchnorm else 0

    def conv(cin, cout, k, norm=bn):
        return cout * (cin * k * k + 1 + norm)

    def asb(cfg, cin):
        return asb_param_count(cfg, cin) + (2 if cfg.use_batchnorm else 0) * (cfg.ss3x3 + cfg.expand)

    total = conv(spec.input_channels, spec.conv1_filters, 3)
    ch = {"conv1": spec.conv1_filters}
    cin = spec.conv1_filters
    for name, cfg in zip(ASB_NAMES, spec.asb_configs):
        total += asb(cfg, cin)
        cin = ch[name] = cfg.expand
    for st in spec.decoder.stages:
        total += conv(ch[st.skip_source], st.skip_proj_filters, 1)
        total += conv(cin + st.skip_proj_filters, st.merge_filters, 1)
        total += asb(st.asb, st.merge_filters)
        cin = st.asb.expand
    filters, out = spec.decoder.head
    return total + conv(cin, filters, 1) + conv(filters, out, 3, norm=0)


class Encoder(Module):
    name = "encoder"

    def __init__(self, spec: NetworkSpec, rng):
        bn = spec.use_batchnorm
        self.conv1 = ConvUnit("conv1", spec.input_channels, spec.conv1_filters, 3,
                              stride=spec.conv1_stride, batchnorm=bn, rng=rng)
        self.stages = [("conv1", self.conv1)]
        ch = spec.conv1_filters
        self.asb_layers = []
        for name, cfg in zip(ASB_NAMES, spec.asb_configs):
            layer = ASBLayer(name, ch, cfg, rng=rng)
            self.asb_layers.append(layer)
            self.stages.append((name, layer))
            ch = layer.out_channels
        self.pools = {name: MaxPool(f"pool_{name}") for name in spec.pool_after}
        self.out_channels = ch
        self.stage_channels = {"conv1": spec.conv1_filters,
                               **{l.name: l.out_channels for l in self.asb_layers}}

    def children(self):
        return [m for _, m in self.stages]

    def forward(self, x, training=False, hook=None):
        skips = {}
        for name, module in self.stages:
            x = module.forward(x, training, hook)
            if name in self.pools:
                skips[name] = x
                x = self.pools[name].forward(x)
        return x, skips

    def backward(self, grad, skip_grads):
        for name, module in reversed(self.stages):
            if name in self.pools:
                grad = self.pools[name].backward(grad) + skip_grads[name]
            grad = module.backward(grad)
        return grad


class LongConnectStage(Module):
    """Bilinear 2x upsample -> concat with 1x1-projected skip -> 1x1 merge -> ASB (dilation 1)."""

    def __init__(self, stage: DecoderStageSpec, in_ch, skip_ch, bn, rng):
        self.name = f"longconnect_{stage.skip_source}"
        self.proj = ConvUnit("skip_proj", skip_ch, stage.skip_proj_filters, 1, batchnorm=bn, rng=rng)
        self.merge = ConvUnit("merge", in_ch + stage.skip_proj_filters, stage.merge_filters, 1,
                              batchnorm=bn, rng=rng)
        self.asb = ASBLayer("asb", stage.merge_filters, stage.asb, rng=rng)
        self.in_ch = in_ch
        self.out_channels = self.asb.out_channels

    def children(self):
        return [self.proj, self.merge, self.asb]

    def forward(self, x, skip, training=False, hook=None):
        self._in_shape = x.shape
        up = ops.bilinear_resize(x, *skip.shape[2:])
        p = self.proj.forward(skip, training, hook)
        m = self.merge.forward(ops.concat_channels([up, p]), training, hook)
        return self.asb.forward(m, training, hook)

    def backward(self, grad):
        g = self.merge.backward(self.asb.backward(grad))
        g_up, g_proj = ops.split_channels(g, [self.in_ch, g.shape[1] - self.in_ch])
        return ops.bilinear_resize_backward(self._in_shape, g_up), self.proj.backward(g_proj)


class Head(Module):
    """1x1 conv (ReLU) -> 3x3 conv (linear) -> bilinear resize; sigmoid applied by the caller."""

    name = "head"

    def __init__(self, in_ch, filters, out_ch, bn, rng):
        self.c1 = ConvUnit("conv1x1", in_ch, filters, 1, batchnorm=bn, rng=rng)
        self.c3 = ConvUnit("conv3x3", filters, out_ch, 3, relu=False, rng=rng)

    def children(self):
        return [self.c1, self.c3]

    def forward(self, x, out_hw, training=False, hook=None):
        y = self.c3.forward(self.c1.forward(x, training, hook), training, hook)
        self._shape = y.shape
        return ops.bilinear_resize(y, *out_hw)

    def backward(self, grad):
        g = ops.bilinear_resize_backward(self._shape, grad)
        return self.c1.backward(self.c3.backward(g))


class Network(Module):
    name = "asbunet"

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(spec, rng)
        ch = self.encoder.out_channels
        self.stages = []
        for st in spec.decoder.stages:
            stage = LongConnectStage(st, ch, self.encoder.stage_channels[st.skip_source],
                                     spec.use_batchnorm, rng)
            self.stages.append(stage)
            ch = stage.out_channels
        self.head = Head(ch, spec.decoder.head[0], spec.decoder.head[1], spec.use_batchnorm, rng)

    def children(self):
        return [self.encoder, *self.stages, self.head]

    def check_input(self, x):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise ValueError(f"expected (N, {self.spec.input_channels}, H, W) input, got {x.shape}")
        f = self.spec.downsampling
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"input size {x.shape[2:]} is not divisible by {f}")
        return x

    def forward_logits(self, x, training=False, hook=None):
        x = self.check_input(x)
        bottleneck, skips = self.encoder.forward(x, training, hook)
        return self.decode_logits(bottleneck, skips, x.shape[2:], training, hook)

    def decode_logits(self, bottleneck, skips, out_hw, training=False, hook=None):
        y = bottleneck
        for stage in self.stages:
            y = stage.forward(y, skips[_source(stage)], training, hook)
        return self.head.forward(y, out_hw, training, hook)

    def forward(self, x, training=False, hook=None):
        return ops.sigmoid(self.forward_logits(x, training, hook))

    def backward(self, grad_logits):
        g = self.head.backward(grad_logits)
        skip_grads = {}
        for stage in reversed(self.stages):
            g, g_skip = stage.backward(g)
            skip_grads[_source(stage)] = g_skip
        return self.encoder.backward(g, skip_grads)


def _source(stage: LongConnectStage) -> str:
    return stage.name.removeprefix("longconnect_")


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    return Network(spec, seed)


def encoder_forward(net: Network, x, training=False):
    x = net.check_input(x)
    return net.encoder.forward(x, training)


def decoder_forward(net: Network, bottleneck, skips, out_hw=None, training=False):
    """Decode to a sigmoid mask; output size defaults to the input size implied by the skips."""
    for stage in net.stages:
        src = _source(stage)
        if src not in skips:
            raise ValueError(f"missing skip output {src!r}")
        expected = net.encoder.stage_channels[src]
        if skips[src].shape[1] != expected:
            raise ValueError(f"skip {src!r} has {skips[src].shape[1]} channels, expected {expected}")
    if out_hw is None:
        h, w = skips["conv1"].shape[2:]
        out_hw = (h * net.spec.conv1_stride, w * net.spec.conv1_stride)
    return ops.sigmoid(net.decode_logits(bottleneck, skips, out_hw, training))
