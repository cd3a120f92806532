"""Rasterization of LiDAR returns onto the vehicle-centric BEV grid.

Produces the three-channel (occupancy, max-height, log-density) input
tensor, a sparse class-label raster from labelled returns, the forward
visibility-cone mask, and a plain bilinear RGB resize.

All functions are pure.  Point coordinates are expected in the vehicle
frame (x forward, y left, z up, metres); pass a world pose to have
world-frame points transformed on the way in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    BevGridSpec,
    BinaryMask,
    DYNAMIC_CLASSES,
    Pose2D,
    TRAINABLE_CLASSES,
)

#: Vertical clamp applied to per-cell maximum heights, metres above the
#: ego ground plane.
DEFAULT_HEIGHT_RANGE = (-2.0, 4.0)

#: Point count at which the log-density channel saturates at 1.
DEFAULT_DENSITY_CAP = 64

#: Class priority used to resolve per-cell vote ties: dynamic classes
#: first, then lower code.
_TIE_ORDER = tuple(sorted(DYNAMIC_CLASSES)) + tuple(
    c for c in sorted(TRAINABLE_CLASSES) if c not in DYNAMIC_CLASSES
)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LidarBevRaster:
    """Per-cell LiDAR statistics on a BEV grid.

    occupancy is 1 exactly where counts >= 1; empty cells carry zero
    height and density so the channels can be fed to a network without
    a separate validity plane.
    """

    grid: BevGridSpec
    occupancy: np.ndarray
    height: np.ndarray
    density: np.ndarray
    counts: np.ndarray
    height_range: tuple[float, float] = DEFAULT_HEIGHT_RANGE
    density_cap: int = DEFAULT_DENSITY_CAP

    def __post_init__(self) -> None:
        n = self.grid.size_px
        occ = np.asarray(self.occupancy, dtype=np.uint8)
        hgt = np.asarray(self.height, dtype=np.float64)
        den = np.asarray(self.density, dtype=np.float64)
        cnt = np.asarray(self.counts, dtype=np.int64)
        for name, a in (("occupancy", occ), ("height", hgt), ("density", den), ("counts", cnt)):
            if a.shape != (n, n):
                raise ValueError(f"{name} must have shape ({n}, {n}), got {a.shape}")
        if not np.isin(occ, (0, 1)).all():
            raise ValueError("occupancy must be 0/1")
        if (cnt < 0).any():
            raise ValueError("counts must be non-negative")
        if ((occ == 1) != (cnt >= 1)).any():
            raise ValueError("occupancy must equal (counts >= 1)")
        empty = cnt == 0
        if hgt[empty].any() or den[empty].any():
            raise ValueError("empty cells must have zero height and density")
        if (hgt < 0).any() or (hgt > 1).any() or (den < 0).any() or (den > 1).any():
            raise ValueError("height and density must lie in [0, 1]")
        lo, hi = self.height_range
        if not lo < hi:
            raise ValueError(f"height_range must satisfy min < max, got {self.height_range}")
        if self.density_cap < 1:
            raise ValueError("density_cap must be >= 1")
        object.__setattr__(self, "occupancy", _readonly(occ))
        object.__setattr__(self, "height", _readonly(hgt))
        object.__setattr__(self, "density", _readonly(den))
        object.__setattr__(self, "counts", _readonly(cnt))
        object.__setattr__(self, "height_range", (float(lo), float(hi)))
        object.__setattr__(self, "density_cap", int(self.density_cap))


@dataclass(frozen=True)
class SparseLabelRaster:
    """Majority class label per cell; 255 marks unsupervised cells."""

    grid: BevGridSpec
    label: np.ndarray
    support: np.ndarray

    def __post_init__(self) -> None:
        n = self.grid.size_px
        lab = np.asarray(self.label, dtype=np.uint8)
        sup = np.asarray(self.support, dtype=np.int64)
        if lab.shape != (n, n) or sup.shape != (n, n):
            raise ValueError(f"label and support must have shape ({n}, {n})")
        if (sup < 0).any():
            raise ValueError("support must be non-negative")
        labelled = lab != 255
        if not np.isin(lab[labelled], TRAINABLE_CLASSES).all():
            raise ValueError("labels must be trainable classes or 255")
        if (sup[labelled] < 1).any():
            raise ValueError("labelled cells need support >= 1")
        object.__setattr__(self, "label", _readonly(lab))
        object.__setattr__(self, "support", _readonly(sup))

    @property
    def supervised(self) -> np.ndarray:
        """Boolean mask of cells carrying a label."""
        return self.label != 255


def _gather_points(sweeps) -> np.ndarray:
    """Stack one sweep, a list of sweeps, or raw arrays into (N, >=3)."""
    if sweeps is None:
        return np.zeros((0, 3), dtype=np.float64)
    if hasattr(sweeps, "points"):
        sweeps = [sweeps.points]
    elif isinstance(sweeps, np.ndarray):
        sweeps = [sweeps]
    parts = []
    for s in sweeps:
        a = np.asarray(getattr(s, "points", s), dtype=np.float64)
        if a.size == 0:
            continue
        if a.ndim != 2 or a.shape[1] < 3:
            raise ValueError(f"point array must be (N, >=3), got shape {a.shape}")
        parts.append(a[:, :3])
    if not parts:
        return np.zeros((0, 3), dtype=np.float64)
    return np.concatenate(parts, axis=0)


def rasterize_lidar(
    sweeps,
    ego: Pose2D | None = None,
    grid: BevGridSpec | None = None,
    *,
    height_range: tuple[float, float] = DEFAULT_HEIGHT_RANGE,
    density_cap: int = DEFAULT_DENSITY_CAP,
) -> LidarBevRaster:
    """Accumulate LiDAR returns into occupancy/height/density channels.

    Parameters
    ----------
    sweeps
        One point array, a sweep object exposing ``.points``, or a list
        of either.  Columns are x, y, z; extra columns are ignored.
    ego
        When given, points are world-frame and get mapped into this
        pose's vehicle frame first.  When None, points are already
        vehicle-frame.
    grid
        Target raster geometry; defaults to the standard 42 m / 600 px.
    height_range
        Metres clamped and mapped affinely onto [0, 1] for the height
        channel.
    density_cap
        Count at which ln(1 + n) / ln(1 + cap) saturates to 1.

    Returns
    -------
    LidarBevRaster
        Points outside the grid extent are discarded; an empty input
        yields all-zero channels.
    """
    grid = grid or BevGridSpec()
    lo, hi = height_range
    if not lo < hi:
        raise ValueError(f"height_range must satisfy min < max, got {height_range}")
    if density_cap < 1:
        raise ValueError("density_cap must be >= 1")

    pts = _gather_points(sweeps)
    if ego is not None and len(pts):
        f, l = ego.world_to_ego(pts[:, 0], pts[:, 1])
    else:
        f, l = pts[:, 0], pts[:, 1]
    z = pts[:, 2]

    n = grid.size_px
    counts = np.zeros((n, n), dtype=np.int64)
    zmax = np.full((n, n), -np.inf)
    if len(pts):
        rows, cols, inside = grid.bin_ego_points(f, l)
        rows, cols, z_in = rows[inside], cols[inside], z[inside]
        np.add.at(counts, (rows, cols), 1)
        np.maximum.at(zmax, (rows, cols), z_in)

    hit = counts >= 1
    height = np.zeros((n, n), dtype=np.float64)
    height[hit] = (np.clip(zmax[hit], lo, hi) - lo) / (hi - lo)
    density = np.zeros((n, n), dtype=np.float64)
    density[hit] = np.minimum(
        np.log1p(counts[hit]) / math.log1p(density_cap), 1.0
    )
    return LidarBevRaster(
        grid=grid,
        occupancy=hit.astype(np.uint8),
        height=height,
        density=density,
        counts=counts,
        height_range=(float(lo), float(hi)),
        density_cap=int(density_cap),
    )


def merge_lidar_rasters(a: LidarBevRaster, b: LidarBevRaster) -> LidarBevRaster:
    """Combine two rasters of the same geometry as if rasterized jointly.

    Counts add, heights take the per-cell maximum, and occupancy and
    density are recomputed, so splitting a sweep and merging the halves
    reproduces the single-pass result exactly.
    """
    if a.grid != b.grid or a.height_range != b.height_range or a.density_cap != b.density_cap:
        raise ValueError("rasters must share grid, height_range and density_cap")
    counts = a.counts + b.counts
    height = np.maximum(a.height, b.height)
    hit = counts >= 1
    density = np.zeros_like(height)
    density[hit] = np.minimum(np.log1p(counts[hit]) / math.log1p(a.density_cap), 1.0)
    return LidarBevRaster(
        grid=a.grid,
        occupancy=hit.astype(np.uint8),
        height=height,
        density=density,
        counts=counts,
        height_range=a.height_range,
        density_cap=a.density_cap,
    )


def rasterize_sparse_labels(
    points,
    labels,
    ego: Pose2D | None = None,
    grid: BevGridSpec | None = None,
) -> SparseLabelRaster:
    """Vote labelled returns into a per-cell majority class raster.

    Ties go to the dynamic class first, then the lower class code.
    Cells receiving no points stay 255.  Labels outside the trainable
    set are rejected.
    """
    grid = grid or BevGridSpec()
    pts = np.asarray(points, dtype=np.float64)
    lab = np.asarray(labels)
    if pts.size == 0:
        pts = pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] < 2:
        raise ValueError(f"points must be (N, >=2), got shape {pts.shape}")
    if lab.shape != (pts.shape[0],):
        raise ValueError("labels must be one code per point")
    if len(lab) and not np.isin(lab, TRAINABLE_CLASSES).all():
        bad = sorted(set(np.unique(lab).tolist()) - set(TRAINABLE_CLASSES))
        raise ValueError(f"labels must be trainable classes, got {bad}")

    if ego is not None and len(pts):
        f, l = ego.world_to_ego(pts[:, 0], pts[:, 1])
    else:
        f, l = pts[:, 0], pts[:, 1]

    n = grid.size_px
    votes = np.zeros((n, n, len(TRAINABLE_CLASSES)), dtype=np.int64)
    if len(pts):
        rows, cols, inside = grid.bin_ego_points(f, l)
        np.add.at(votes, (rows[inside], cols[inside], lab[inside].astype(np.int64)), 1)

    support = votes.sum(axis=2)
    label = np.full((n, n), 255, dtype=np.uint8)
    best = np.zeros((n, n), dtype=np.int64)
    for cls in _TIE_ORDER:
        v = votes[:, :, cls]
        take = v > best  # strict: earlier classes in _TIE_ORDER win ties
        label[take] = cls
        best[take] = v[take]
    return SparseLabelRaster(grid=grid, label=label, support=support)


def visibility_cone_mask(
    grid: BevGridSpec | None = None,
    ego_cell: tuple[int, int] | None = None,
    hfov_deg: float = 90.0,
    max_range_m: float | None = None,
) -> BinaryMask:
    """Forward cone of cells visible from the ego point.

    A cell is included when its centre lies within +-hfov/2 of the
    vehicle-forward direction (up the raster) as seen from the top-left
    corner of ``ego_cell``, and within ``max_range_m`` (both bounds
    inclusive).  The range defaults to the grid half-diagonal, which
    covers every cell.
    """
    grid = grid or BevGridSpec()
    if not 0.0 < hfov_deg <= 360.0:
        raise ValueError(f"hfov_deg must be in (0, 360], got {hfov_deg}")
    if ego_cell is None:
        ego_cell = grid.ego_cell
    if max_range_m is None:
        max_range_m = grid.extent_m * math.sqrt(2.0) / 2.0

    n = grid.size_px
    er, ec = float(ego_cell[0]), float(ego_cell[1])
    rows = np.arange(n, dtype=np.float64)[:, None] + 0.5 - er
    cols = np.arange(n, dtype=np.float64)[None, :] + 0.5 - ec
    fwd = -rows  # row index decreases ahead of the vehicle
    lat = np.broadcast_to(cols, (n, n))
    angle = np.arctan2(np.abs(lat), np.broadcast_to(fwd, (n, n)))
    dist_m = np.hypot(np.broadcast_to(rows, (n, n)), lat) * grid.cell_m
    inside = (angle <= math.radians(hfov_deg) / 2.0) & (dist_m <= max_range_m)
    return BinaryMask(inside)


def resize_rgb(image: np.ndarray, target: tuple[int, int] = (600, 600)) -> np.ndarray:
    """Bilinear resize with half-pixel centre alignment.

    An image already at the target size passes through bit-identically.
    Integer inputs come back in their own dtype (values rounded half
    away from zero); float inputs stay float64.
    """
    img = np.asarray(image)
    if img.ndim not in (2, 3):
        raise ValueError(f"image must be (H, W) or (H, W, C), got shape {img.shape}")
    h, w = img.shape[:2]
    th, tw = int(target[0]), int(target[1])
    if h == 0 or w == 0 or th <= 0 or tw <= 0:
        raise ValueError(f"empty image or target: {img.shape[:2]} -> {(th, tw)}")
    if (h, w) == (th, tw):
        return img.copy()

    def axis_weights(src: int, dst: int):
        pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
        base = np.floor(pos).astype(np.int64)
        frac = pos - base
        i0 = np.clip(base, 0, src - 1)
        i1 = np.clip(base + 1, 0, src - 1)
        return i0, i1, frac

    r0, r1, fr = axis_weights(h, th)
    c0, c1, fc = axis_weights(w, tw)
    # separable: rows first, then columns
    a = img.astype(np.float64)
    fr_col = fr.reshape((-1,) + (1,) * (a.ndim - 1))
    mid = a[r0] * (1.0 - fr_col) + a[r1] * fr_col
    fc_col = fc.reshape((1, -1) + (1,) * (a.ndim - 2))
    out = mid[:, c0] * (1.0 - fc_col) + mid[:, c1] * fc_col
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        out = np.clip(np.floor(out + 0.5), info.min, info.max).astype(img.dtype)
    return out
