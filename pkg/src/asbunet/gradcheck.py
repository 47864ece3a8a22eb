"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from . import ops
from .layers import ConvUnit, MaxPool


def numerical_grad(f, x: np.ndarray, step=1e-5, indices=None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place.

    ``indices`` (flat) restricts the check to a subset; other entries stay 0.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic, numeric, floor=1e-8) -> float:
    """max |a - n| / max(|a| + |n|, floor) taken over the whole array."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(a) + np.abs(n)), floor))


def activation_signature(module) -> bytes:
    """ReLU on/off pattern and max-pool winners cached by the last forward pass.

    Two forward passes with equal signatures ran through the same linear
    piece of the network, so central differences between them are valid.
    """
    parts, stack = [], [module]
    while stack:
        m = stack.pop()
        cache = getattr(m, "_cache", None)
        if isinstance(m, ConvUnit) and m.relu and cache is not None:
            parts.append(np.packbits(cache[3] > 0).tobytes())
        elif isinstance(m, MaxPool) and cache is not None:
            parts.append(np.asarray(cache[1]).tobytes())
        stack.extend(m.children())
        stack.extend(getattr(m, "pools", {}).values())
    return b"".join(parts)


def numerical_grad_smooth(f, x: np.ndarray, signature, step=1e-5, indices=None):
    """Central differences plus a flag per entry telling whether ``x + step`` and
    ``x - step`` share an activation pattern (no ReLU or max-pool switch in
    between).  ``signature()`` is read after each call of ``f``."""
    grad = np.zeros_like(x, dtype=np.float64)
    smooth = np.ones(x.shape, dtype=bool)
    flat, gflat, sflat = x.reshape(-1), grad.reshape(-1), smooth.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + step
        fp, sp = f(), signature()
        flat[i] = orig - step
        fm, sm = f(), signature()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
        sflat[i] = sp == sm
    return grad, smooth


def network_gradcheck(net, x, y, pos_weight=2.0, fraction=0.01, rng=None, step=1e-5):
    """Relative error of the weighted-BCE gradient on a random ``fraction`` of
    every parameter tensor, in training mode.

    Samples whose +/- step straddles a ReLU or max-pool switch are set aside,
    since central differences are no oracle there.  Returns
    ``(error, compared, set_aside)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)

    def loss():
        return ops.weighted_bce_with_logits(net.forward_logits(x, training=True), y, pos_weight)[0]

    net.zero_grad()
    _, g = ops.weighted_bce_with_logits(net.forward_logits(x, training=True), y, pos_weight)
    net.backward(g)
    analytic, numeric, set_aside = [], [], 0
    for _, p in net.named_params():
        k = max(1, int(round(fraction * p.values.size)))
        idx = rng.choice(p.values.size, size=k, replace=False)
        num, smooth = numerical_grad_smooth(loss, p.values, lambda: activation_signature(net), step, idx)
        keep = idx[smooth.ravel()[idx]]
        set_aside += len(idx) - len(keep)
        analytic.extend(p.grad.ravel()[keep])
        numeric.extend(num.ravel()[keep])
    return relative_error(np.array(analytic), np.array(numeric)), len(analytic), set_aside
