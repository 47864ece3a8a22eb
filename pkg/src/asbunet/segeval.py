"""Ignore-band Jaccard scoring with a misdetection penalty.

For every connected object in the label, a disk whose radius scales with the
square root of the object's area dilates and erodes it; the XOR of the two is
a boundary ring in which disagreements between label and prediction are
forgiven.  Pixels where both masks agree stay counted by default, so a wider
ring can only raise the Jaccard index; ``drop_ring_agreement`` removes ring
pixels from both masks instead.  Each predicted component that touches no
labelled pixel (and is not wholly inside the ring) costs 1.0.

Conventions: Euclidean disks; 8-connectivity; pixels outside the image are
background for dilation and foreground for erosion (so erosion is the dual
of dilation and a full mask erodes to itself).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class IgnoreBandParams:
    osf_beta: float = 0.05
    min_radius: int = 1
    drop_ring_agreement: bool = False

    def __post_init__(self):
        if self.osf_beta < 0 or self.min_radius < 0:
            raise ValueError("osf_beta and min_radius must be non-negative")

    def radius(self, area: int) -> int:
        return max(self.min_radius, int(round(self.osf_beta * np.sqrt(area))))


def as_mask(m, threshold: float = 0.5) -> np.ndarray:
    """Binary bool mask from a {0,1}/bool/{0,255} array or soft probabilities."""
    m = np.asarray(m)
    if m.dtype == bool:
        return m
    if m.dtype == np.uint8:
        if not np.all((m == 0) | (m == 1) | (m == 255)):
            raise ValueError("uint8 masks must hold only 0/1 or 0/255")
        return m > 0
    if np.all((m == 0) | (m == 1)):
        return m.astype(bool)
    return m > threshold


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy * yy + xx * xx <= r * r


def dilate(mask, radius: int) -> np.ndarray:
    mask = as_mask(mask)
    if radius == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disk(radius), border_value=0)


def erode(mask, radius: int) -> np.ndarray:
    mask = as_mask(mask)
    if radius == 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=disk(radius), border_value=1)


def components(mask) -> tuple[np.ndarray, int]:
    return ndimage.label(as_mask(mask), structure=EIGHT)


def ignore_band(label, params: IgnoreBandParams = IgnoreBandParams()) -> np.ndarray:
    """Pixels that count for scoring (True) -- the complement of the boundary ring."""
    label = as_mask(label)
    ring = np.zeros_like(label)
    lab, n = components(label)
    if n:
        areas = np.bincount(lab.ravel())
        for i in range(1, n + 1):
            obj = lab == i
            r = params.radius(int(areas[i]))
            ring |= dilate(obj, r) ^ erode(obj, r)
    return ~ring


def jaccard(a, b) -> float:
    a, b = as_mask(a), as_mask(b)
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def masked_jaccard(label, pred, params: IgnoreBandParams = IgnoreBandParams(), band=None) -> float:
    label, pred = as_mask(label), as_mask(pred)
    if label.shape != pred.shape:
        raise ValueError(f"label {label.shape} and prediction {pred.shape} differ in shape")
    if band is None:
        band = ignore_band(label, params)
    if not params.drop_ring_agreement:
        band = band | (label & pred)
    return jaccard(label & band, pred & band)


def score_with_penalty(label, pred, params: IgnoreBandParams = IgnoreBandParams()) -> float:
    return score_details(label, pred, params)["score"]


def score_details(label, pred, params: IgnoreBandParams = IgnoreBandParams()) -> dict:
    """Jaccard over the counted area with misdetected components taken out,
    minus 1.0 per misdetection."""
    label, pred = as_mask(label), as_mask(pred)
    if label.shape != pred.shape:
        raise ValueError(f"label {label.shape} and prediction {pred.shape} differ in shape")
    band = ignore_band(label, params)
    false_px, n_false = _false_components(label, pred, band)
    j = masked_jaccard(label, pred & ~false_px, params, band=band)
    return {"jaccard": j, "misdetections": n_false, "score": j - float(n_false)}


def _false_components(label, pred, band):
    """Predicted components that touch no labelled pixel and are not wholly
    inside the ignore ring.  Components are taken on the full prediction so
    that the ring does not cut one object into fragments."""
    lab, n = components(pred)
    if n == 0:
        return np.zeros(label.shape, dtype=bool), 0
    hits = np.bincount(lab[label], minlength=n + 1)
    counted = np.bincount(lab[band], minlength=n + 1)
    false_ids = np.flatnonzero((hits[1:] == 0) & (counted[1:] > 0)) + 1
    return np.isin(lab, false_ids), len(false_ids)


@dataclass
class EvalReport:
    names: list[str]
    jaccard: list[float]
    misdetections: list[int]
    scores: list[float]
    params: IgnoreBandParams = field(default_factory=IgnoreBandParams)

    @property
    def count(self) -> int:
        return len(self.scores)

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.scores)) if self.scores else float("nan")

    @property
    def mean_jaccard(self) -> float:
        return float(np.mean(self.jaccard)) if self.jaccard else float("nan")

    @property
    def total_misdetections(self) -> int:
        return int(sum(self.misdetections))

    def summary(self) -> dict:
        return {"count": self.count, "mean_score": self.mean_score,
                "mean_jaccard": self.mean_jaccard, "misdetections": self.total_misdetections}


def evaluate_dataset(labels, preds, params: IgnoreBandParams = IgnoreBandParams(),
                     names=None) -> EvalReport:
    """Score aligned label/prediction sequences; ``names`` defaults to running indices."""
    labels, preds = list(labels), list(preds)
    if len(labels) != len(preds):
        raise ValueError(f"{len(labels)} labels but {len(preds)} predictions")
    names = [str(i) for i in range(len(labels))] if names is None else list(names)
    if len(names) != len(labels):
        raise ValueError(f"{len(names)} names for {len(labels)} mask pairs")
    rows = [score_details(label, pred, params) for label, pred in zip(labels, preds)]
    return EvalReport(names, [r["jaccard"] for r in rows], [r["misdetections"] for r in rows],
                      [r["score"] for r in rows], params)
