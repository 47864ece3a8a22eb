"""Stateful layer wrappers that cache activations for the backward pass."""

from __future__ import annotations

import numpy as np

from . import ops


class Param:
    """A trainable array with a gradient accumulator."""

    __slots__ = ("values", "grad")

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param(shape={self.values.shape})"


class Module:
    """Minimal container protocol: named parameters and buffers, forward/backward."""

    def children(self):
        return []

    def own_params(self) -> dict[str, Param]:
        return {}

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_params(self, prefix=""):
        for name, p in self.own_params().items():
            yield prefix + name, p
        for child in self.children():
            yield from child.named_params(f"{prefix}{child.name}.")

    def named_buffers(self, prefix=""):
        for name, b in self.own_buffers().items():
            yield prefix + name, b
        for child in self.children():
            yield from child.named_buffers(f"{prefix}{child.name}.")

    def snap_to_float32(self) -> None:
        """Round every parameter and buffer onto the float32 grid, in place, so
        that a checkpoint (f32 payload) holds the weights exactly."""
        for _, arr in self.named_state():
            arr[...] = arr.astype(np.float32)

    def named_state(self, prefix=""):
        """Parameters and buffers interleaved per module, in build order."""
        for name, p in self.own_params().items():
            yield prefix + name, p.values
        for name, b in self.own_buffers().items():
            yield prefix + name, b
        for child in self.children():
            yield from child.named_state(f"{prefix}{child.name}.")

    def named_conv_units(self, prefix=""):
        for child in self.children():
            if isinstance(child, ConvUnit):
                yield prefix + child.name, child
            else:
                yield from child.named_conv_units(f"{prefix}{child.name}.")

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()

    def num_params(self) -> int:
        return sum(p.values.size for _, p in self.named_params())


def he_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Kaiming-He normal init (fan-in, ReLU gain), rounded onto the float32 grid
    so that freshly built networks survive an f32 checkpoint bit-exactly."""
    fan_in = int(np.prod(shape[1:]))
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return w.astype(np.float32).astype(np.float64)


class ConvUnit(Module):
    """conv -> optional batch norm -> optional ReLU, with 'same' padding."""

    def __init__(self, name, in_ch, out_ch, k=3, stride=1, dilation=1,
                 batchnorm=False, relu=True, rng=None):
        self.name = name
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.dilation = stride, dilation
        self.relu = relu
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(he_normal(rng, (out_ch, in_ch, k, k)))
        self.bias = Param(np.zeros(out_ch))
        self.bn = None
        if batchnorm:
            self.gamma = Param(np.ones(out_ch))
            self.beta = Param(np.zeros(out_ch))
            self.bn = ops.BatchNormState(self.gamma.values, self.beta.values,
                                         np.zeros(out_ch), np.ones(out_ch))
        self._cache = None

    def own_params(self):
        out = {"weight": self.weight, "bias": self.bias}
        if self.bn is not None:
            out.update(gamma=self.gamma, beta=self.beta)
        return out

    def own_buffers(self):
        if self.bn is None:
            return {}
        return {"running_mean": self.bn.running_mean, "running_var": self.bn.running_var}

    def conv_params(self) -> ops.ConvParams:
        return ops.ConvParams.same(self.weight.values, self.bias.values,
                                   self.stride, self.dilation)

    def forward(self, x, training=False, hook=None):
        p = self.conv_params()
        y = hook(self, x) if hook is not None else None
        cols = bn_cache = None
        if y is None:
            cols = ops.im2col(x, self.k, self.k, p.stride, p.dilation, p.padding)
            y = ops.conv2d_forward(x, p, cols=cols)
            if self.bn is not None:
                y, bn_cache = ops.batchnorm_forward(y, self.bn, training)
        if self.relu:
            y = ops.relu(y)
        self._cache = (x, cols, bn_cache, y)
        return y

    def backward(self, grad):
        x, cols, bn_cache, y = self._cache
        if self.relu:
            grad = ops.relu_backward(y, grad)
        if self.bn is not None:
            grad, g_gamma, g_beta = ops.batchnorm_backward(self.bn, bn_cache, grad)
            self.gamma.grad += g_gamma
            self.beta.grad += g_beta
        gx, gw, gb = ops.conv2d_backward(x, self.conv_params(), grad, cols=cols)
        self.weight.grad += gw
        self.bias.grad += gb
        self._cache = None
        return gx

    def folded(self):
        """Kernel and bias with inference-mode batch norm folded in."""
        w, b = self.weight.values, self.bias.values
        if self.bn is None:
            return w.copy(), b.copy()
        s = self.bn.gamma / np.sqrt(self.bn.running_var + self.bn.epsilon)
        return w * s[:, None, None, None], (b - self.bn.running_mean) * s + self.bn.beta


class MaxPool(Module):
    def __init__(self, name, kernel=2, stride=2):
        self.name = name
        self.params = ops.PoolParams(kernel, stride)
        self._cache = None

    def forward(self, x, training=False, hook=None):
        out, argmax = ops.maxpool_forward(x, self.params)
        self._cache = (x.shape, argmax)
        return out

    def backward(self, grad):
        shape, argmax = self._cache
        return ops.maxpool_backward(shape, argmax, grad)
