"""Forward and backward passes for the primitive layers.

All functions work on plain ndarrays in NCHW layout (``Tensor`` objects are
accepted wherever an array is expected).  Convolution is cross-correlation,
as in the mainstream frameworks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

LOGIT_CLAMP = 30.0


def same_padding(k: int, dilation: int = 1) -> tuple[int, int]:
    """Padding (before, after) that keeps spatial size at stride 1."""
    total = dilation * (k - 1)
    return total // 2, total - total // 2


def _pad4(padding) -> tuple[int, int, int, int]:
    if np.isscalar(padding):
        p = int(padding)
        return p, p, p, p
    padding = tuple(int(p) for p in padding)
    if len(padding) == 2:
        return padding[0], padding[1], padding[0], padding[1]
    if len(padding) != 4:
        raise ValueError(f"padding must be an int, (lo, hi) or (top, bottom, left, right): {padding}")
    return padding


@dataclass
class ConvParams:
    """Kernel ``(out, in, kh, kw)``, bias ``(out,)`` and sampling geometry.

    ``padding`` is ``(top, bottom, left, right)``; an int or a ``(lo, hi)``
    pair is expanded to that form.
    """

    kernel: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    dilation: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be rank 4, got shape {self.kernel.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.shape != (self.kernel.shape[0],):
                raise ShapeError(f"bias shape {self.bias.shape} != ({self.kernel.shape[0]},)")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be >= 1")
        self.padding = _pad4(self.padding)
        if min(self.padding) < 0:
            raise ValueError("padding must be non-negative")

    @classmethod
    def same(cls, kernel, bias=None, stride=1, dilation=1):
        kh, kw = np.shape(kernel)[2:]
        ph, pw = same_padding(kh, dilation), same_padding(kw, dilation)
        return cls(kernel, bias, stride, dilation, (*ph, *pw))


def conv_output_size(n: int, k: int, stride: int, dilation: int, pad_total: int) -> int:
    return (n + pad_total - dilation * (k - 1) - 1) // stride + 1


def im2col(x, kh, kw, stride=1, dilation=1, padding=0) -> np.ndarray:
    """Gather dilated patches into ``(N, C*kh*kw, Ho*Wo)``."""
    x = np.asarray(x)
    n, c, h, w = x.shape
    pt, pb, pl, pr = _pad4(padding)
    ho = conv_output_size(h, kh, stride, dilation, pt + pb)
    wo = conv_output_size(w, kw, stride, dilation, pl + pr)
    if ho < 1 or wo < 1:
        raise ShapeError(f"non-positive output size {(ho, wo)} for input {(h, w)}")
    if kh == kw == 1 and stride == 1 and not any((pt, pb, pl, pr)):
        return x.reshape(n, c, h * w)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if any((pt, pb, pl, pr)) else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            cols[:, :, i, j] = xp[:, :, y0:y0 + stride * (ho - 1) + 1:stride,
                                  x0:x0 + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, x_shape, kh, kw, stride=1, dilation=1, padding=0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to an image."""
    n, c, h, w = x_shape
    pt, pb, pl, pr = _pad4(padding)
    ho = conv_output_size(h, kh, stride, dilation, pt + pb)
    wo = conv_output_size(w, kw, stride, dilation, pl + pr)
    if kh == kw == 1 and stride == 1 and not any((pt, pb, pl, pr)):
        return cols.reshape(n, c, h, w)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=cols.dtype)
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            xp[:, :, y0:y0 + stride * (ho - 1) + 1:stride,
               x0:x0 + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    return xp[:, :, pt:pt + h, pl:pl + w]


def _out_hw(x_shape, p: ConvParams):
    kh, kw = p.kernel.shape[2:]
    pt, pb, pl, pr = p.padding
    return (conv_output_size(x_shape[2], kh, p.stride, p.dilation, pt + pb),
            conv_output_size(x_shape[3], kw, p.stride, p.dilation, pl + pr))


def conv2d_forward(x, p: ConvParams, cols=None) -> np.ndarray:
    x = np.asarray(x)
    o, c, kh, kw = p.kernel.shape
    if x.shape[1] != c:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {c}")
    if cols is None:
        cols = im2col(x, kh, kw, p.stride, p.dilation, p.padding)
    ho, wo = _out_hw(x.shape, p)
    out = np.matmul(p.kernel.reshape(o, -1), cols)
    if p.bias is not None:
        out += p.bias[None, :, None]
    return out.reshape(x.shape[0], o, ho, wo)


def conv2d_backward(x, p: ConvParams, grad_out, cols=None):
    """Return ``(grad_x, grad_kernel, grad_bias)``."""
    x = np.asarray(x)
    o, c, kh, kw = p.kernel.shape
    ho, wo = _out_hw(x.shape, p)
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (x.shape[0], o, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(x.shape[0], o, ho, wo)}")
    if cols is None:
        cols = im2col(x, kh, kw, p.stride, p.dilation, p.padding)
    g = grad_out.reshape(x.shape[0], o, ho * wo)
    grad_kernel = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(p.kernel.shape)
    grad_bias = g.sum(axis=(0, 2))
    grad_cols = np.matmul(p.kernel.reshape(o, -1).T, g)
    grad_x = col2im(grad_cols, x.shape, kh, kw, p.stride, p.dilation, p.padding)
    return grad_x, grad_kernel, grad_bias


@dataclass(frozen=True)
class PoolParams:
    kernel: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("pool kernel and stride must be >= 1")


def maxpool_forward(x, p: PoolParams = PoolParams()):
    """Window maxima plus flat argmax indices into the input plane.

    Ties resolve to the first row-major position in the window.
    """
    x = np.asarray(x)
    n, c, h, w = x.shape
    k, s = p.kernel, p.stride
    if k > h or k > w:
        raise ShapeError(f"pool window {k} larger than input {(h, w)}")
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, k * k)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * s + local // k
    cols = np.arange(wo)[None, :] * s + local % k
    return out, rows * w + cols


def maxpool_backward(x_shape, argmax, grad_out) -> np.ndarray:
    n, c, h, w = x_shape
    grad = np.zeros((n, c, h * w), dtype=np.asarray(grad_out).dtype)
    flat_idx = argmax.reshape(n, c, -1)
    g = np.asarray(grad_out).reshape(n, c, -1)
    # windows may overlap when stride < kernel
    bi, ci = np.indices(flat_idx.shape[:2])
    np.add.at(grad, (bi[..., None], ci[..., None], flat_idx), g)
    return grad.reshape(x_shape)


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    average_decay: float = 0.99
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, average_decay=0.99, epsilon=1e-5):
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels),
                   np.ones(channels), average_decay, epsilon)

    def __post_init__(self):
        if not 0.0 < self.average_decay < 1.0:
            raise ValueError("average_decay must lie in (0, 1)")


def batchnorm_forward(x, s: BatchNormState, training: bool):
    """Normalize per channel; returns ``(out, cache)``.

    In training mode the running statistics of ``s`` are updated in place.
    """
    x = np.asarray(x)
    if x.shape[1] != s.gamma.shape[0]:
        raise ShapeError(f"input has {x.shape[1]} channels, batch norm has {s.gamma.shape[0]}")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        d = s.average_decay
        s.running_mean[...] = d * s.running_mean + (1 - d) * mean
        s.running_var[...] = d * s.running_var + (1 - d) * var
    else:
        mean, var = s.running_mean, s.running_var
    inv_std = 1.0 / np.sqrt(var + s.epsilon)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = s.gamma[None, :, None, None] * xhat + s.beta[None, :, None, None]
    return out, (xhat, inv_std, training)


def batchnorm_backward(s: BatchNormState, cache, grad_out):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, training = cache
    g = np.asarray(grad_out)
    grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
    grad_beta = g.sum(axis=(0, 2, 3))
    gx_hat = g * s.gamma[None, :, None, None]
    if not training:
        return gx_hat * inv_std[None, :, None, None], grad_gamma, grad_beta
    m = g.shape[0] * g.shape[2] * g.shape[3]
    grad_x = (inv_std[None, :, None, None] / m) * (
        m * gx_hat
        - gx_hat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (gx_hat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
    return grad_x, grad_gamma, grad_beta


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` interpolation weights, align_corners=False."""
    if n_in < 1 or n_out < 1:
        raise ShapeError("resize dimensions must be >= 1")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> np.ndarray:
    x = np.asarray(x)
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ry, rx = bilinear_matrix(h, out_h).astype(x.dtype), bilinear_matrix(w, out_w).astype(x.dtype)
    return ry @ x @ rx.T


def bilinear_resize_backward(x_shape, grad_out) -> np.ndarray:
    h, w = x_shape[2:]
    g = np.asarray(grad_out)
    out_h, out_w = g.shape[2:]
    if (h, w) == (out_h, out_w):
        return g.copy()
    ry, rx = bilinear_matrix(h, out_h).astype(g.dtype), bilinear_matrix(w, out_w).astype(g.dtype)
    return ry.T @ g @ rx


def concat_channels(xs) -> np.ndarray:
    xs = [np.asarray(x) for x in xs]
    if not xs:
        raise ShapeError("nothing to concatenate")
    ref = (xs[0].shape[0], *xs[0].shape[2:])
    for x in xs[1:]:
        if (x.shape[0], *x.shape[2:]) != ref:
            raise ShapeError(f"cannot concatenate {x.shape} with batch/spatial dims {ref}")
    return np.concatenate(xs, axis=1)


def split_channels(grad_out, sizes) -> list[np.ndarray]:
    return np.split(np.asarray(grad_out), np.cumsum(sizes)[:-1], axis=1)


def relu(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(out, grad_out) -> np.ndarray:
    return np.where(out > 0.0, grad_out, 0.0)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _check_labels(label):
    label = np.asarray(label)
    if not np.all((label == 0) | (label == 1)):
        raise ValueError("labels must be 0 or 1")
    return label.astype(float)


def weighted_bce_with_logits(logits, label, pos_weight: float = 1.0):
    """Mean weighted binary cross entropy and its gradient w.r.t. the logits.

    Logits are clamped to +-30 (the gradient is zero beyond the clamp).
    """
    if pos_weight <= 0:
        raise ValueError("pos_weight must be positive")
    y = _check_labels(label)
    z = np.asarray(logits, dtype=float)
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} and labels {y.shape} differ in shape")
    zc = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
    # softplus(-z) = -log(sigmoid(z)), softplus(z) = -log(1 - sigmoid(z))
    sp_neg = np.logaddexp(0.0, -zc)
    sp_pos = np.logaddexp(0.0, zc)
    n = z.size
    loss = float(np.sum(pos_weight * y * sp_neg + (1.0 - y) * sp_pos) / n)
    p = sigmoid(zc)
    grad = (pos_weight * y * (p - 1.0) + (1.0 - y) * p) / n
    grad = np.where(np.abs(z) <= LOGIT_CLAMP, grad, 0.0)
    return loss, grad


def weighted_bce(pred, label, pos_weight: float = 1.0) -> float:
    """Loss for probabilities ``pred``; evaluated through the logit form."""
    p = np.asarray(pred, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("predictions must lie in [0, 1]")
    lo, hi = sigmoid(-LOGIT_CLAMP), sigmoid(LOGIT_CLAMP)
    p = np.clip(p, lo, hi)
    logits = np.log(p) - np.log1p(-p)
    return weighted_bce_with_logits(logits, label, pos_weight)[0]
