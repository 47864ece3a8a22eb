"""Dense rank-4 tensors in (batch, channels, height, width) row-major order."""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor shapes are invalid or incompatible."""


def _check_shape(shape) -> tuple[int, int, int, int]:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a rank-4 shape, got {shape}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


class Tensor:
    """Values plus an optional gradient buffer of identical shape.

    ``values`` is a C-contiguous ndarray; the flat index of element
    ``(b, c, y, x)`` is ``((b*C + c)*H + y)*W + x``.
    """

    __slots__ = ("values", "grad")

    def __init__(self, values, grad=None):
        values = np.ascontiguousarray(values, dtype=DTYPE)
        _check_shape(values.shape)
        self.values = values
        self.grad = None
        if grad is not None:
            self.accumulate_grad(grad)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"

    def index(self, b: int, c: int, y: int, x: int) -> float:
        return index(self, b, c, y, x)

    def accumulate_grad(self, g) -> "Tensor":
        return accumulate_grad(self, g)

    def zero_grad(self):
        self.grad = None


def new_tensor(shape, fill: float = 0.0) -> Tensor:
    shape = _check_shape(shape)
    return Tensor(np.full(shape, fill, dtype=DTYPE))


def index(t: Tensor, b: int, c: int, y: int, x: int) -> float:
    B, C, H, W = t.shape
    for i, n in zip((b, c, y, x), (B, C, H, W)):
        if not 0 <= i < n:
            raise IndexError(f"index {(b, c, y, x)} out of range for shape {t.shape}")
    return float(t.values.reshape(-1)[((b * C + c) * H + y) * W + x])


def accumulate_grad(t: Tensor, g) -> Tensor:
    g = np.asarray(g, dtype=DTYPE)
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    if t.grad is None:
        t.grad = np.zeros(t.shape, dtype=DTYPE)
    t.grad += g
    return t
