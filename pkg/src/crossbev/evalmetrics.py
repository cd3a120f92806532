"""Segmentation and reconstruction metrics with explicit ignore handling.

The confusion matrix is accumulated over trainable classes only.  A cell
contributes to the matrix when it is inside the evaluation mask and both
ground truth and prediction carry trainable codes; cells whose ground
truth is IGNORE, and cells whose prediction is void or canopy, fall into
``ignored_pixels`` instead, so the matrix plus the ignored count always
tiles the evaluated area exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import (
    ClassId,
    DYNAMIC_CLASSES,
    NUM_TRAINABLE,
    STATIC_CLASSES,
    SemanticMask,
    TRAINABLE_CLASSES,
)
from .bevraster import SparseLabelRaster

IGNORE = int(ClassId.IGNORE)

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


def _data(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts over the 5 trainable classes plus the ignored-cell tally."""

    matrix: np.ndarray
    ignored_pixels: int
    total_pixels: int

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.int64)
        k = NUM_TRAINABLE
        if m.shape != (k, k):
            raise ValueError(f"matrix must be {k}x{k}, got {m.shape}")
        if (m < 0).any() or self.ignored_pixels < 0 or self.total_pixels < 0:
            raise ValueError("counts must be non-negative")
        if int(m.sum()) + self.ignored_pixels != self.total_pixels:
            raise ValueError(
                f"matrix sum {int(m.sum())} + ignored {self.ignored_pixels} "
                f"!= total {self.total_pixels}"
            )
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "ignored_pixels", int(self.ignored_pixels))
        object.__setattr__(self, "total_pixels", int(self.total_pixels))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.matrix + other.matrix,
            self.ignored_pixels + other.ignored_pixels,
            self.total_pixels + other.total_pixels,
        )

    @property
    def accuracy(self) -> float | None:
        """Fraction correct among matrix-counted cells; None when empty."""
        n = int(self.matrix.sum())
        if n == 0:
            return None
        return float(np.trace(self.matrix)) / n

    @property
    def ignored_fraction(self) -> float:
        if self.total_pixels == 0:
            return 0.0
        return self.ignored_pixels / self.total_pixels


@dataclass(frozen=True)
class IoUReport:
    """Per-class IoU plus the three headline means.

    Classes with no TP, FP or FN mass are undefined: they carry None and
    are left out of every mean.  A mean over an all-undefined group is
    itself None.
    """

    per_class_iou: dict[int, float | None]
    miou_all: float | None
    miou_static: float | None
    miou_dyn: float | None
    ignored_fraction: float
    undefined_classes: tuple[int, ...] = field(default_factory=tuple)
    accuracy: float | None = None

    def to_dict(self) -> dict:
        return {
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "miou_all": self.miou_all,
            "miou_static": self.miou_static,
            "miou_dyn": self.miou_dyn,
            "ignored_fraction": self.ignored_fraction,
            "undefined_classes": list(self.undefined_classes),
            "accuracy": self.accuracy,
        }


def confusion(pred, gt, eval_mask=None) -> ConfusionMatrix:
    """Tally predictions against ground truth inside an optional mask."""
    p = _data(pred)
    g = _data(gt)
    if p.shape != g.shape:
        raise ValueError(f"grid mismatch: pred {p.shape} vs gt {g.shape}")
    if eval_mask is None:
        mask = np.ones(p.shape, dtype=bool)
    else:
        mask = _data(eval_mask).astype(bool)
        if mask.shape != p.shape:
            raise ValueError(f"grid mismatch: mask {mask.shape} vs pred {p.shape}")

    trainable_g = np.isin(g, TRAINABLE_CLASSES)
    trainable_p = np.isin(p, TRAINABLE_CLASSES)
    counted = mask & trainable_g & trainable_p
    total = int(mask.sum())
    ignored = total - int(counted.sum())

    k = NUM_TRAINABLE
    flat = g[counted].astype(np.int64) * k + p[counted].astype(np.int64)
    m = np.bincount(flat, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(m, ignored, total)


def iou_report(cm: ConfusionMatrix) -> IoUReport:
    """Intersection-over-union per class and the standard aggregates."""
    m = cm.matrix
    tp = np.diag(m).astype(np.float64)
    fp = m.sum(axis=0) - tp
    fn = m.sum(axis=1) - tp
    denom = tp + fp + fn

    per_class: dict[int, float | None] = {}
    undefined = []
    for c in TRAINABLE_CLASSES:
        c = int(c)
        if denom[c] == 0:
            per_class[c] = None
            undefined.append(c)
        else:
            per_class[c] = float(tp[c] / denom[c])

    def group_mean(classes) -> float | None:
        vals = [per_class[int(c)] for c in classes if per_class[int(c)] is not None]
        if not vals:
            return None
        return float(np.mean(vals))

    return IoUReport(
        per_class_iou=per_class,
        miou_all=group_mean(TRAINABLE_CLASSES),
        miou_static=group_mean(STATIC_CLASSES),
        miou_dyn=group_mean(DYNAMIC_CLASSES),
        ignored_fraction=cm.ignored_fraction,
        undefined_classes=tuple(undefined),
        accuracy=cm.accuracy,
    )


def eval_lidar_holdout(pred, sparse: SparseLabelRaster) -> IoUReport:
    """Score a prediction on the cells a sparse label raster supervises."""
    p = _data(pred)
    if p.shape != sparse.label.shape:
        raise ValueError(f"grid mismatch: pred {p.shape} vs sparse {sparse.label.shape}")
    mask = sparse.label != IGNORE
    return iou_report(confusion(p, sparse.label, mask))


def restrict_vehicles_to_visible(gt, counts, min_returns: int = 3) -> SemanticMask:
    """Drop vehicle components the LiDAR barely touches.

    Each 4-connected component of vehicle cells whose summed return
    count is below ``min_returns`` becomes IGNORE; every other cell is
    left alone.  Idempotent by construction.
    """
    g = _data(gt)
    c = np.asarray(getattr(counts, "counts", counts))
    if g.shape != c.shape:
        raise ValueError(f"grid mismatch: gt {g.shape} vs counts {c.shape}")
    if min_returns < 1:
        raise ValueError("min_returns must be >= 1")

    vehicles = g == int(ClassId.VEHICLE)
    labeled, n = ndimage.label(vehicles, structure=_FOUR_CONN)
    out = np.array(g, dtype=np.uint8, copy=True)
    if n:
        sums = ndimage.sum_labels(c, labels=labeled, index=np.arange(1, n + 1))
        weak = np.flatnonzero(sums < min_returns) + 1
        if len(weak):
            out[np.isin(labeled, weak)] = IGNORE
    return SemanticMask(out)


def psnr(a, b, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    r = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def _ssim_single(x: np.ndarray, y: np.ndarray, window: int, sigma: float, c1: float, c2: float) -> float:
    kern = _gaussian_kernel(window, sigma)

    def smooth(img: np.ndarray) -> np.ndarray:
        out = ndimage.correlate1d(img, kern, axis=0, mode="constant")
        out = ndimage.correlate1d(out, kern, axis=1, mode="constant")
        h = window // 2
        return out[h:-h or None, h:-h or None]

    mu_x = smooth(x)
    mu_y = smooth(y)
    var_x = smooth(x * x) - mu_x * mu_x
    var_y = smooth(y * y) - mu_y * mu_y
    cov = smooth(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ssim(
    a,
    b,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    peak: float = 255.0,
) -> float:
    """Mean Gaussian-weighted structural similarity over the valid region.

    Multi-channel images are scored per channel and averaged.  Requires
    both images to be at least window-sized.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim not in (2, 3):
        raise ValueError(f"image must be (H, W) or (H, W, C), got shape {x.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    h, w = x.shape[:2]
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than the {window}-pixel window")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    if x.ndim == 2:
        return _ssim_single(x, y, window, sigma, c1, c2)
    vals = [
        _ssim_single(x[:, :, ch], y[:, :, ch], window, sigma, c1, c2)
        for ch in range(x.shape[2])
    ]
    return float(np.mean(vals))
