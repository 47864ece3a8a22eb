"""Synthetic segmentation data: warm soft-edged blobs over cool textured backgrounds."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from matplotlib.path import Path
from scipy import ndimage

from . import ops


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    label: np.ndarray  # (H, W) uint8 in {0, 1}
    metadata: dict = field(default_factory=dict)


def _texture(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform([0.1, 0.25, 0.3], [0.35, 0.55, 0.65])
    img = np.empty((3, h, w))
    for c in range(3):
        t = np.zeros((h, w))
        for _ in range(3):
            fy, fx = rng.uniform(1, 6, size=2)
            t += rng.uniform(0.02, 0.08) * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
        img[c] = base[c] + t
    img += ndimage.gaussian_filter(rng.normal(0, 0.04, (h, w)), 1.0)[None]
    return img


def _shape_mask(rng, h, w, cy, cx, size):
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    if rng.random() < 0.5:
        a = size * rng.uniform(0.7, 1.0)
        b = size * rng.uniform(0.45, 1.0)
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0, "ellipse"
    k = rng.integers(5, 9)
    ang = np.sort(rng.uniform(0, 2 * np.pi, k))
    rad = size * rng.uniform(0.6, 1.0, k)
    verts = np.c_[cx + rad * np.cos(ang), cy + rad * np.sin(ang)]
    inside = Path(verts).contains_points(np.c_[xx.ravel(), yy.ravel()])
    return inside.reshape(h, w), "polygon"


def render_sample(rng, size: int, max_objects=4, occlusion=True, scale_variation=True,
                  n_objects=None) -> SyntheticSample:
    h = w = size
    img = _texture(rng, h, w)
    label = np.zeros((h, w), dtype=bool)
    n = int(rng.integers(1, max_objects + 1)) if n_objects is None else n_objects
    objects = []
    lo, hi = (0.04, 0.3) if scale_variation else (0.12, 0.16)
    for _ in range(n):
        s = size * float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        cy, cx = rng.uniform(0.1 * size, 0.9 * size, 2)
        mask, kind = _shape_mask(rng, h, w, cy, cx, s)
        if not mask.any():
            continue
        alpha = ndimage.gaussian_filter(mask.astype(float), 0.8)
        color = rng.uniform([0.75, 0.25, 0.05], [1.0, 0.55, 0.35])
        shade = 1.0 - 0.15 * (np.mgrid[0:h, 0:w][0] - cy) / size
        fg = color[:, None, None] * shade[None]
        img = img * (1 - alpha) + fg * alpha
        label |= alpha >= 0.5
        objects.append({"kind": kind, "size": s, "center": (float(cy), float(cx))})
    occluders = 0
    if occlusion and objects and rng.random() < 0.3:
        obj = objects[rng.integers(len(objects))]
        cy, cx = obj["center"]
        th = rng.uniform(0, np.pi)
        half = max(2.0, obj["size"] * rng.uniform(0.15, 0.35))
        yy, xx = np.mgrid[0:h, 0:w] + 0.5
        dist = np.abs(-(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th))
        bar = dist <= half
        alpha = ndimage.gaussian_filter(bar.astype(float), 0.8)
        img = img * (1 - alpha) + _texture(rng, h, w) * alpha
        label &= ~(alpha >= 0.5)
        occluders = 1
    img = np.clip(img + rng.normal(0, 0.01, img.shape), 0.0, 1.0)
    meta = {"objects": objects, "occluders": occluders,
            "foreground_fraction": float(label.mean())}
    return SyntheticSample(img, label.astype(np.uint8), meta)


def render_background(rng, size: int) -> np.ndarray:
    """An object-free image drawn from the same background distribution."""
    return np.clip(_texture(rng, size, size) + rng.normal(0, 0.01, (3, size, size)), 0.0, 1.0)


def generate_dataset(n: int, image_size: int = 128, seed: int = 0, occlusion=True,
                     scale_variation=True, max_objects=4) -> list[SyntheticSample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if image_size < 16 or image_size % 16:
        raise ValueError(f"image size must be a positive multiple of 16, got {image_size}")
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        s = render_sample(rng, image_size, max_objects, occlusion, scale_variation)
        # regenerate degenerate draws (fully occluded or flooded scenes)
        if 0.0 < s.metadata["foreground_fraction"] < 0.9:
            out.append(s)
    return out


def flip(sample: SyntheticSample) -> SyntheticSample:
    return replace(sample, image=sample.image[:, :, ::-1].copy(), label=sample.label[:, ::-1].copy())


def crop_resize(sample: SyntheticSample, top: int, left: int, ch: int, cw: int) -> SyntheticSample:
    h, w = sample.label.shape
    img = sample.image[None, :, top:top + ch, left:left + cw]
    lab = sample.label[None, None, top:top + ch, left:left + cw].astype(float)
    img = ops.bilinear_resize(img, h, w)[0]
    lab = ops.bilinear_resize(lab, h, w)[0, 0] >= 0.5
    return replace(sample, image=np.clip(img, 0, 1), label=lab.astype(np.uint8))


def add_noise(sample: SyntheticSample, sigma: float, rng) -> SyntheticSample:
    img = np.clip(sample.image + rng.normal(0, sigma, sample.image.shape), 0.0, 1.0)
    return replace(sample, image=img)


def augment(sample: SyntheticSample, seed, p_flip=0.5, crop=True, max_sigma=0.05,
            min_area=0.8) -> SyntheticSample:
    """Random horizontal flip, crop-and-resize (>= ``min_area`` of the image) and Gaussian noise."""
    rng = np.random.default_rng(seed)
    if rng.random() < p_flip:
        sample = flip(sample)
    if crop:
        h, w = sample.label.shape
        side = np.sqrt(rng.uniform(min_area, 1.0))
        ch, cw = max(1, int(round(h * side))), max(1, int(round(w * side)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        sample = crop_resize(sample, top, left, ch, cw)
    if max_sigma > 0:
        sample = add_noise(sample, rng.uniform(0, max_sigma), rng)
    return sample


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    """Batch images ``(N, 3, H, W)`` and labels ``(N, 1, H, W)``."""
    x = np.stack([s.image for s in samples])
    y = np.stack([s.label for s in samples])[:, None].astype(np.float64)
    return x, y
