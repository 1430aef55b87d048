"""Axis-aligned box geometry, IoU and the centre-assisted regression loss.

Boxes are ``(x_min, y_min, x_max, y_max)`` in pixels. Every function accepts
arrays of shape ``(..., 4)`` and broadcasts over the leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import ConfigError


class Box(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @classmethod
    def from_xywh(cls, x, y, w, h):
        return cls(x, y, x + w, y + h)


@dataclass(frozen=True)
class RegLossConfig:
    alpha1: float = 0.5
    alpha2: float = 0.5
    C: float = 8.0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0 or self.alpha1 + self.alpha2 <= 0:
            raise ConfigError(f"need alpha1, alpha2 >= 0 with a positive sum, got "
                              f"{self.alpha1}, {self.alpha2}")
        if self.C <= 0:
            raise ConfigError(f"C must be positive, got {self.C}")


def as_boxes(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.shape[-1] != 4:
        raise ConfigError(f"boxes need 4 coordinates, got shape {b.shape}")
    return b


def xywh_to_xyxy(b):
    b = as_boxes(b)
    return np.concatenate([b[..., :2], b[..., :2] + b[..., 2:]], axis=-1)


def xyxy_to_xywh(b):
    b = as_boxes(b)
    return np.concatenate([b[..., :2], b[..., 2:] - b[..., :2]], axis=-1)


def centers(b):
    b = as_boxes(b)
    return (b[..., :2] + b[..., 2:]) / 2


def areas(b):
    b = as_boxes(b)
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def iou(a, b):
    """Intersection over union; 0 where the union is empty."""
    a, b = as_boxes(a), as_boxes(b)
    iw = np.maximum(0.0, np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]))
    ih = np.maximum(0.0, np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]))
    inter = iw * ih
    union = areas(a) + areas(b) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out if out.ndim else float(out)


def pairwise_iou(a, b):
    """(N, 4) x (M, 4) -> (N, M)."""
    return np.asarray(iou(as_boxes(a)[:, None, :], as_boxes(b)[None, :, :]))


def center_distance(a, b):
    return np.linalg.norm(centers(a) - centers(b), axis=-1)


def center_assisted_loss(pred, gt, C: float):
    """``1 - exp(-D / C)`` with D the Euclidean distance between box centres."""
    if C <= 0:
        raise ConfigError(f"C must be positive, got {C}")
    out = 1.0 - np.exp(-center_distance(pred, gt) / C)
    return out if np.ndim(out) else float(out)


def regression_loss(pred, gt, cfg: RegLossConfig):
    """``alpha1 * centre-assisted + alpha2 * (1 - IoU)``."""
    out = cfg.alpha1 * center_assisted_loss(pred, gt, cfg.C) + cfg.alpha2 * (1.0 - iou(pred, gt))
    return out if np.ndim(out) else float(out)


def iou_grad(pred, gt):
    """d IoU / d pred, shape (..., 4). Zero wherever the boxes do not overlap."""
    p, g = as_boxes(pred), as_boxes(gt)
    lo_x = np.maximum(p[..., 0], g[..., 0])
    hi_x = np.minimum(p[..., 2], g[..., 2])
    lo_y = np.maximum(p[..., 1], g[..., 1])
    hi_y = np.minimum(p[..., 3], g[..., 3])
    iw_raw = hi_x - lo_x
    ih_raw = hi_y - lo_y
    overlap = (iw_raw > 0) & (ih_raw > 0)
    iw = np.maximum(iw_raw, 0.0)
    ih = np.maximum(ih_raw, 0.0)
    inter = iw * ih
    pw = p[..., 2] - p[..., 0]
    ph = p[..., 3] - p[..., 1]
    union = pw * ph + areas(g) - inter
    safe_u = np.where(union > 0, union, 1.0)
    # IoU = I / U,  U = Ap + Ag - I
    d_inter = (union + inter) / safe_u**2
    d_area = -inter / safe_u**2

    # which box supplies each intersection edge (ties go to pred's max/min side)
    dI = np.zeros(p.shape)
    dI[..., 0] = -ih * (p[..., 0] >= g[..., 0])
    dI[..., 2] = ih * (p[..., 2] <= g[..., 2])
    dI[..., 1] = -iw * (p[..., 1] >= g[..., 1])
    dI[..., 3] = iw * (p[..., 3] <= g[..., 3])
    dA = np.stack([-ph, -pw, ph, pw], axis=-1)
    grad = d_inter[..., None] * dI + d_area[..., None] * dA
    return np.where((overlap & (union > 0))[..., None], grad, 0.0)


def center_assisted_grad(pred, gt, C: float):
    """d(1 - exp(-D/C)) / d pred, shape (..., 4); zero where D = 0."""
    diff = centers(pred) - centers(gt)
    D = np.linalg.norm(diff, axis=-1)
    coef = np.exp(-D / C) / C / np.where(D > 0, D, 1.0)
    dc = np.where((D > 0)[..., None], coef[..., None] * diff, 0.0)
    # centre = (min + max) / 2 on each axis
    return 0.5 * np.concatenate([dc, dc], axis=-1)


def regression_loss_grad(pred, gt, cfg: RegLossConfig):
    return cfg.alpha1 * center_assisted_grad(pred, gt, cfg.C) - cfg.alpha2 * iou_grad(pred, gt)


def mean_object_size(boxes) -> float:
    """Mean of ``sqrt(w*h)``: the dataset-level size constant ``C``."""
    b = as_boxes(boxes).reshape(-1, 4)
    if not len(b):
        raise ConfigError("cannot derive an object size from zero boxes")
    return float(np.sqrt(np.maximum(areas(b), 0.0)).mean())
