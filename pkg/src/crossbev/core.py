"""Class taxonomy, planar poses, and the vehicle-centric BEV grid.

Conventions used throughout the package:

* World frame: x grows east, y grows north, units are metres.
* Heading is measured counter-clockwise from east, in radians,
  normalised to ``[0, 2*pi)``.
* The BEV grid is heading-up: row index decreases in the direction of
  travel, column index decreases towards the vehicle's left.  The ego
  point sits on the corner shared by the four central cells; the "ego
  cell" is the one whose top-left corner is that point.
* Grid cells are addressed ``(row, col)`` with ``(0, 0)`` at the
  top-left of the raster.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi

# Tolerance below which a trig value is snapped to an exact -1, 0 or +1.
# Keeps axis-aligned headings (multiples of 90 degrees) bit-exact so that
# rotating a pose by a quarter turn permutes grid cells without rounding.
_TRIG_SNAP = 1e-12


class ClassId(enum.IntEnum):
    """Semantic class codes shared by every raster in the package."""

    ROAD = 0
    SIDEWALK = 1
    BUILDING = 2
    VEHICLE = 3
    VRU = 4
    #: Vegetation canopy. Only ever produced by the aerial teacher; it is
    #: never a training target and collapses to IGNORE during fusion.
    TREE = 254
    #: Cells that contribute no loss and no metric mass.
    IGNORE = 255


#: Classes a downstream BEV model is trained to predict.
TRAINABLE_CLASSES: tuple[int, ...] = (
    ClassId.ROAD,
    ClassId.SIDEWALK,
    ClassId.BUILDING,
    ClassId.VEHICLE,
    ClassId.VRU,
)

#: Layout classes that do not move between frames.
STATIC_CLASSES: tuple[int, ...] = (ClassId.ROAD, ClassId.SIDEWALK, ClassId.BUILDING)

#: Movable agents.
DYNAMIC_CLASSES: tuple[int, ...] = (ClassId.VEHICLE, ClassId.VRU)

NUM_TRAINABLE = len(TRAINABLE_CLASSES)

_VALID_CODES = frozenset(int(c) for c in ClassId)


def _snap_trig(v: float) -> float:
    if abs(v) < _TRIG_SNAP:
        return 0.0
    if abs(v - 1.0) < _TRIG_SNAP:
        return 1.0
    if abs(v + 1.0) < _TRIG_SNAP:
        return -1.0
    return v


def normalize_heading(heading_rad: float) -> float:
    """Wrap an angle into ``[0, 2*pi)``."""
    h = math.fmod(float(heading_rad), TWO_PI)
    if h < 0.0:
        h += TWO_PI
    if h >= TWO_PI:  # fmod can land exactly on 2*pi after the shift
        h = 0.0
    return h


@dataclass(frozen=True)
class Pose2D:
    """Planar pose: position in metres, heading CCW from east."""

    x: float
    y: float
    heading_rad: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading_rad", normalize_heading(self.heading_rad))

    @property
    def forward(self) -> tuple[float, float]:
        """Unit vector in the direction of travel, world frame."""
        return (
            _snap_trig(math.cos(self.heading_rad)),
            _snap_trig(math.sin(self.heading_rad)),
        )

    @property
    def left(self) -> tuple[float, float]:
        """Unit vector towards the vehicle's left, world frame."""
        fx, fy = self.forward
        return (-fy, fx)

    def world_to_ego(self, x, y):
        """Express world points as (forward, left) offsets from this pose.

        Accepts scalars or arrays; returns matching shapes.
        """
        fx, fy = self.forward
        dx = np.asarray(x, dtype=np.float64) - self.x
        dy = np.asarray(y, dtype=np.float64) - self.y
        fwd = dx * fx + dy * fy
        left = -dx * fy + dy * fx
        if fwd.ndim == 0:
            return float(fwd), float(left)
        return fwd, left

    def ego_to_world(self, forward_m, left_m):
        """Inverse of :meth:`world_to_ego`."""
        fx, fy = self.forward
        f = np.asarray(forward_m, dtype=np.float64)
        l = np.asarray(left_m, dtype=np.float64)
        x = self.x + f * fx - l * fy
        y = self.y + f * fy + l * fx
        if x.ndim == 0:
            return float(x), float(y)
        return x, y


@dataclass(frozen=True)
class BevGridSpec:
    """Geometry of the square, vehicle-centric BEV raster.

    The default covers 42 m x 42 m at 600 x 600 cells, i.e. 7 cm cells.
    """

    extent_m: float = 42.0
    size_px: int = 600

    def __post_init__(self) -> None:
        if not (self.extent_m > 0.0 and math.isfinite(self.extent_m)):
            raise ValueError(f"extent_m must be positive and finite, got {self.extent_m!r}")
        if int(self.size_px) != self.size_px or self.size_px <= 0:
            raise ValueError(f"size_px must be a positive integer, got {self.size_px!r}")
        object.__setattr__(self, "extent_m", float(self.extent_m))
        object.__setattr__(self, "size_px", int(self.size_px))

    @property
    def cell_m(self) -> float:
        """Edge length of one cell in metres."""
        return self.extent_m / self.size_px

    @property
    def ego_anchor(self) -> tuple[float, float]:
        """Continuous (row, col) of the ego point."""
        return (self.size_px / 2.0, self.size_px / 2.0)

    @property
    def ego_cell(self) -> tuple[int, int]:
        """Cell whose top-left corner is the ego point."""
        return (self.size_px // 2, self.size_px // 2)

    def ego_to_grid(self, forward_m, left_m):
        """Continuous (row, col) for ego-frame offsets. Vectorised.

        The multiplication happens before the division so that offsets
        which are exact multiples of the cell size land on exact grid
        coordinates (42/600 = 0.07 is not representable in binary).
        """
        half = self.size_px / 2.0
        f = np.asarray(forward_m, dtype=np.float64)
        l = np.asarray(left_m, dtype=np.float64)
        r = half - (f * self.size_px) / self.extent_m
        c = half - (l * self.size_px) / self.extent_m
        if r.ndim == 0:
            return float(r), float(c)
        return r, c

    def grid_to_ego(self, row_cont, col_cont):
        """Ego-frame (forward, left) offsets for continuous grid coords."""
        half = self.size_px / 2.0
        r = np.asarray(row_cont, dtype=np.float64)
        c = np.asarray(col_cont, dtype=np.float64)
        fwd = ((half - r) * self.extent_m) / self.size_px
        left = ((half - c) * self.extent_m) / self.size_px
        if fwd.ndim == 0:
            return float(fwd), float(left)
        return fwd, left

    def bin_ego_points(self, forward_m, left_m):
        """Discretise ego-frame points into cells.

        Returns ``(rows, cols, inside)`` where ``inside`` flags points
        that fall within the raster.  Rows/cols of outside points are
        clipped into range so they can be used as indices, but only
        after masking with ``inside``.
        """
        r, c = self.ego_to_grid(forward_m, left_m)
        r = np.atleast_1d(r)
        c = np.atleast_1d(c)
        rows = np.floor(r).astype(np.int64)
        cols = np.floor(c).astype(np.int64)
        inside = (
            (rows >= 0)
            & (rows < self.size_px)
            & (cols >= 0)
            & (cols < self.size_px)
        )
        np.clip(rows, 0, self.size_px - 1, out=rows)
        np.clip(cols, 0, self.size_px - 1, out=cols)
        return rows, cols, inside


def world_to_cell(pose: Pose2D, x: float, y: float, spec: BevGridSpec | None = None):
    """Cell containing a world point, or None when it lies off-grid."""
    spec = spec or BevGridSpec()
    f, l = pose.world_to_ego(x, y)
    r_cont, c_cont = spec.ego_to_grid(f, l)
    row = math.floor(r_cont)
    col = math.floor(c_cont)
    if 0 <= row < spec.size_px and 0 <= col < spec.size_px:
        return (row, col)
    return None


def cell_to_world(
    pose: Pose2D, row: int, col: int, spec: BevGridSpec | None = None
) -> tuple[float, float]:
    """World coordinates of a cell's centre.

    Raises ValueError for indices outside the raster.
    """
    spec = spec or BevGridSpec()
    if not (0 <= row < spec.size_px and 0 <= col < spec.size_px):
        raise ValueError(
            f"cell ({row}, {col}) outside {spec.size_px}x{spec.size_px} grid"
        )
    f, l = spec.grid_to_ego(row + 0.5, col + 0.5)
    return pose.ego_to_world(f, l)


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class SemanticMask:
    """Per-cell class codes (H, W) uint8, restricted to known codes."""

    data: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.data)
        if a.ndim != 2:
            raise ValueError(f"semantic mask must be 2-D, got shape {a.shape}")
        if a.dtype != np.uint8:
            if not np.issubdtype(a.dtype, np.integer):
                raise ValueError(f"semantic mask must be integer, got {a.dtype}")
            bad = ~np.isin(a, list(_VALID_CODES))
            if bad.any():
                raise ValueError(f"unknown class codes present: {sorted(np.unique(a[bad]).tolist())}")
            a = a.astype(np.uint8)
        else:
            bad = ~np.isin(a, list(_VALID_CODES))
            if bad.any():
                raise ValueError(f"unknown class codes present: {sorted(np.unique(a[bad]).tolist())}")
        object.__setattr__(self, "data", _readonly(a))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def fraction(self, code: int) -> float:
        """Fraction of cells carrying the given class code."""
        return float(np.mean(self.data == code))


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-cell class distribution (H, W, K); each cell sums to 1.

    The sum check tolerates 1e-5 of drift so float32 softmax outputs
    pass without renormalisation.
    """

    data: np.ndarray
    _SUM_TOL = 1e-5

    def __post_init__(self) -> None:
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3 or a.shape[2] < 2:
            raise ValueError(f"probability map must be (H, W, K>=2), got shape {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("probability map contains non-finite values")
        if (a < 0).any():
            raise ValueError("probability map contains negative values")
        sums = a.sum(axis=2)
        err = np.abs(sums - 1.0).max()
        if err > self._SUM_TOL:
            raise ValueError(f"cell distributions must sum to 1 (max deviation {err:.3g})")
        object.__setattr__(self, "data", _readonly(a))

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class ScalarMap:
    """Per-cell scalar field (H, W), finite floats."""

    data: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"scalar map must be 2-D, got shape {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("scalar map contains non-finite values")
        object.__setattr__(self, "data", _readonly(a))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class BinaryMask:
    """Per-cell boolean field (H, W)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.data)
        if a.ndim != 2:
            raise ValueError(f"binary mask must be 2-D, got shape {a.shape}")
        if a.dtype != np.bool_:
            if not (np.issubdtype(a.dtype, np.integer) and np.isin(a, (0, 1)).all()):
                raise ValueError("binary mask must be boolean or 0/1 integers")
            a = a.astype(bool)
        object.__setattr__(self, "data", _readonly(a))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def count(self) -> int:
        return int(self.data.sum())
