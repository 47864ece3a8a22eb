"""Post-training int8 quantization.

Weights (with inference batch norm folded in) use symmetric per-tensor int8;
the input of every convolution uses affine per-tensor uint8 from min/max
calibration.  Convolutions accumulate ``(q_x - zp) * q_w`` in int32 and are
rescaled to float by ``scale_x * scale_w``; pooling, resizing, concatenation
and the sigmoid stay in float.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, ops
from .network import Network, NetworkSpec

SYMMETRIC = "symmetric_int8_weights"
AFFINE = "affine_uint8_activations"
RANGES = {SYMMETRIC: (-127, 127), AFFINE: (0, 255)}
SCALE_FLOOR = 1e-12


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    scheme: str = SYMMETRIC

    def __post_init__(self):
        if self.scheme not in RANGES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        lo, hi = RANGES[self.scheme]
        if self.scheme == SYMMETRIC and self.zero_point != 0:
            raise ValueError("symmetric quantization has zero_point 0")
        if not lo <= self.zero_point <= hi:
            raise ValueError(f"zero_point {self.zero_point} outside [{lo}, {hi}]")

    @property
    def qrange(self) -> tuple[int, int]:
        return RANGES[self.scheme]


def _f32(v: float) -> float:
    # scales are stored as float32 in checkpoints
    return float(np.float32(v))


def weight_qparams(w) -> QuantParams:
    m = float(np.max(np.abs(w))) if np.size(w) else 0.0
    return QuantParams(_f32(max(m / 127.0, SCALE_FLOOR)), 0, SYMMETRIC)


def activation_qparams(lo: float, hi: float) -> QuantParams:
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = _f32(max((hi - lo) / 255.0, SCALE_FLOOR))
    zp = int(np.clip(np.round(-lo / scale), 0, 255))
    return QuantParams(scale, zp, AFFINE)


def quantize(x, qp: QuantParams) -> np.ndarray:
    lo, hi = qp.qrange
    q = np.clip(np.round(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point, lo, hi)
    return q.astype(np.int8 if qp.scheme == SYMMETRIC else np.uint8)


def dequantize(q, qp: QuantParams) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) - qp.zero_point) * qp.scale


@dataclass
class QuantizedConv:
    weight: np.ndarray  # int8, folded
    weight_qp: QuantParams
    bias: np.ndarray  # int8
    bias_qp: QuantParams
    input_qp: QuantParams


@dataclass
class QuantizedModel:
    spec: NetworkSpec
    convs: dict[str, QuantizedConv]

    def structure(self) -> Network:
        return Network(self.spec)


def calibrate(net: Network, sample_inputs, batch_size: int = 8) -> dict[str, QuantParams]:
    """Per-tensor qparams keyed ``<conv>.input`` / ``<conv>.weight`` / ``<conv>.bias``."""
    samples = np.asarray(sample_inputs)
    if samples.ndim != 4 or len(samples) == 0:
        raise QuantizationError("calibration needs at least one (C, H, W) input")
    names = {id(u): n for n, u in net.named_conv_units()}
    ranges: dict[str, list[float]] = {}

    def observe(unit, x):
        r = ranges.setdefault(names[id(unit)], [np.inf, -np.inf])
        r[0] = min(r[0], float(np.min(x)))
        r[1] = max(r[1], float(np.max(x)))
        return None

    for i in range(0, len(samples), batch_size):
        net.forward(samples[i:i + batch_size], training=False, hook=observe)
    qparams = {}
    for name, unit in net.named_conv_units():
        w, b = unit.folded()
        qparams[f"{name}.input"] = activation_qparams(*ranges[name])
        qparams[f"{name}.weight"] = weight_qparams(w)
        qparams[f"{name}.bias"] = weight_qparams(b)
    return qparams


def quantize_network(net: Network, qparams: dict[str, QuantParams]) -> QuantizedModel:
    convs = {}
    for name, unit in net.named_conv_units():
        try:
            wq, bq, iq = (qparams[f"{name}.{k}"] for k in ("weight", "bias", "input"))
        except KeyError as e:
            raise QuantizationError(f"missing quantization parameters {e.args[0]!r}") from None
        w, b = unit.folded()
        convs[name] = QuantizedConv(quantize(w, wq), wq, quantize(b, bq), bq, iq)
    return QuantizedModel(net.spec, convs)


def integer_conv(x, qc: QuantizedConv, stride: int, dilation: int) -> np.ndarray:
    """Quantize the input, accumulate in int32 and rescale to float (bias added)."""
    xq = quantize(x, qc.input_qp).astype(np.int32) - qc.input_qp.zero_point
    k = qc.weight.shape[2]
    pad = ops.same_padding(k, dilation)
    # int8 x uint8 products over <= 864 taps are exact in float64; BLAS does the sum
    cols = ops.im2col(xq.astype(np.float64), k, k, stride, dilation, (*pad, *pad))
    acc = np.matmul(qc.weight.reshape(qc.weight.shape[0], -1).astype(np.float64), cols)
    acc = acc.astype(np.int32)
    n, _, h, w = x.shape
    ho = ops.conv_output_size(h, k, stride, dilation, sum(pad))
    wo = ops.conv_output_size(w, k, stride, dilation, sum(pad))
    out = acc.astype(np.float64) * (qc.input_qp.scale * qc.weight_qp.scale)
    out += dequantize(qc.bias, qc.bias_qp)[None, :, None]
    return out.reshape(n, -1, ho, wo)


def quantized_forward(model: QuantizedModel, x, structure: Network | None = None,
                      batch_size: int = 8) -> np.ndarray:
    """Sigmoid mask from the integer path."""
    net = structure if structure is not None else model.structure()
    names = {id(u): n for n, u in net.named_conv_units()}
    missing = set(names.values()) - set(model.convs)
    if missing:
        raise QuantizationError(f"no quantized weights for {sorted(missing)}")

    def run(unit, inp):
        return integer_conv(inp, model.convs[names[id(unit)]], unit.stride, unit.dilation)

    x = np.asarray(x)
    return np.concatenate([net.forward(x[i:i + batch_size], training=False, hook=run)
                           for i in range(0, len(x), batch_size)])


def encode(model: QuantizedModel) -> bytes:
    entries, acts = [], {}
    for name, qc in model.convs.items():
        entries.append((f"{name}.weight", qc.weight, qc.weight_qp.scale, 0))
        entries.append((f"{name}.bias", qc.bias, qc.bias_qp.scale, 0))
        acts[name] = [qc.input_qp.scale, qc.input_qp.zero_point]
    return checkpoint.encode_quantized(model.spec, entries, {"activations": acts, "folded_batchnorm": True})


def save_quantized(model: QuantizedModel, path) -> int:
    data = encode(model)
    Path(path).write_bytes(data)
    return len(data)


def load_quantized(path) -> QuantizedModel:
    version, blob, entries = checkpoint.decode(Path(path).read_bytes())
    if version != checkpoint.QUANT_VERSION:
        raise checkpoint.CheckpointError(f"expected a quantized checkpoint, got version {version}")
    meta = json.loads(blob)
    spec = NetworkSpec.from_dict(meta["network"])
    table = {name: (q, scale) for name, q, scale, _ in entries}
    acts = meta["activations"]
    convs = {}
    # weight-table order, so that re-encoding reproduces the file
    for name in (n.removesuffix(".weight") for n, *_ in entries if n.endswith(".weight")):
        if name not in acts:
            raise checkpoint.CheckpointError(f"no activation parameters for {name!r}")
        scale, zp = acts[name]
        (w, ws), (b, bs) = table[f"{name}.weight"], table[f"{name}.bias"]
        # stored scales are float32; keep the rounded values so save/load is a fixed point
        convs[name] = QuantizedConv(w, QuantParams(float(ws)), b, QuantParams(float(bs)),
                                    QuantParams(float(scale), int(zp), AFFINE))
    model = QuantizedModel(spec, convs)
    net = model.structure()
    expected = {n: u.weight.values.shape for n, u in net.named_conv_units()}
    got = {n: c.weight.shape for n, c in convs.items()}
    if expected != got:
        raise checkpoint.ShapeTableMismatch("quantized weight table does not match its network spec")
    return model
