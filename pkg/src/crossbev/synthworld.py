"""Deterministic 2.5D scene oracle for exercising the whole pipeline.

A World is a flat background plus an ordered list of footprint
primitives (oriented rectangles, wide polylines, discs), each carrying a
class code and a height.  Later primitives occlude earlier ones when
rasterized.  From a world we derive, all deterministically from seeds:

* nadir orthographic aerial renders with pixel-aligned ground truth and
  a procedural texture keyed to world coordinates, so renders of the
  same area at different camera yaws show the same surface detail;
* an anti-aliased X roof marker stamped on the ego vehicle;
* ray-cast LiDAR sweeps with occlusion, wall/roof/ground returns, and
  z measured above ground;
* multi-stream sensor event logs with independent phases, bounded clock
  jitter, and noisy GNSS fixes, alongside the exact trajectory.

Coordinates follow core's conventions (x east, y north).  Camera yaw is
the compass bearing of the image's up direction: yaw 0 puts north up,
yaw pi/2 puts east up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ClassId, Pose2D, _snap_trig, normalize_heading

STREAMS = ("aerial_rgb", "vehicle_rgb", "lidar_a", "lidar_b", "gnss_imu")

DEFAULT_RATES_HZ = {
    "aerial_rgb": 1.0,
    "vehicle_rgb": 10.0,
    "lidar_a": 10.0,
    "lidar_b": 10.0,
    "gnss_imu": 20.0,
}

# Ego vehicle footprint and roof marker geometry, metres.
EGO_HALF_LEN = 2.3
EGO_HALF_WID = 1.05
EGO_HEIGHT = 1.6
MARKER_STROKE_LEN = 1.7
MARKER_STROKE_WIDTH = 0.28
_MARKER_COLOR = np.array([250.0, 245.0, 80.0])

_TEX_SCALE = 0.25  # metres per texture lattice cell

_COLOR_LUT = np.zeros((256, 3), dtype=np.float64)
_COLOR_LUT[int(ClassId.ROAD)] = (92, 94, 98)
_COLOR_LUT[int(ClassId.SIDEWALK)] = (168, 162, 148)
_COLOR_LUT[int(ClassId.BUILDING)] = (146, 104, 82)
_COLOR_LUT[int(ClassId.VEHICLE)] = (62, 88, 156)
_COLOR_LUT[int(ClassId.VRU)] = (198, 64, 58)
_COLOR_LUT[int(ClassId.TREE)] = (58, 128, 64)

_MASK64 = (1 << 64) - 1


class PlacementError(RuntimeError):
    """Raised when a primitive cannot be placed after bounded retries."""


# --------------------------------------------------------------- primitives


@dataclass(frozen=True)
class RectPrim:
    """Oriented rectangle footprint."""

    cx: float
    cy: float
    half_len: float
    half_wid: float
    angle_rad: float
    class_id: int
    height_m: float

    def contains(self, x, y):
        ca, sa = math.cos(self.angle_rad), math.sin(self.angle_rad)
        dx = np.asarray(x) - self.cx
        dy = np.asarray(y) - self.cy
        lo = dx * ca + dy * sa
        wo = -dx * sa + dy * ca
        return (np.abs(lo) <= self.half_len) & (np.abs(wo) <= self.half_wid)

    def bbox(self):
        ca, sa = abs(math.cos(self.angle_rad)), abs(math.sin(self.angle_rad))
        ex = self.half_len * ca + self.half_wid * sa
        ey = self.half_len * sa + self.half_wid * ca
        return (self.cx - ex, self.cy - ey, self.cx + ex, self.cy + ey)

    @property
    def circumradius(self) -> float:
        return math.hypot(self.half_len, self.half_wid)


@dataclass(frozen=True)
class DiscPrim:
    """Disc footprint."""

    cx: float
    cy: float
    radius: float
    class_id: int
    height_m: float

    def contains(self, x, y):
        dx = np.asarray(x) - self.cx
        dy = np.asarray(y) - self.cy
        return dx * dx + dy * dy <= self.radius * self.radius

    def bbox(self):
        r = self.radius
        return (self.cx - r, self.cy - r, self.cx + r, self.cy + r)


@dataclass(frozen=True)
class PolyPrim:
    """Polyline with width (a chain of capsules)."""

    points: tuple
    width: float
    class_id: int
    height_m: float

    def contains(self, x, y):
        X = np.asarray(x, dtype=np.float64)
        Y = np.asarray(y, dtype=np.float64)
        best = np.full(X.shape, np.inf)
        pts = self.points
        for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
            best = np.minimum(best, _dist_to_segment(X, Y, ax, ay, bx, by))
        return best <= self.width / 2.0

    def bbox(self):
        xs = [p[0] for p in self.points]
        ys = [p[1] for p in self.points]
        h = self.width / 2.0
        return (min(xs) - h, min(ys) - h, max(xs) + h, max(ys) + h)

    def segments(self):
        return list(zip(self.points[:-1], self.points[1:]))


def _dist_to_segment(X, Y, ax, ay, bx, by):
    vx, vy = bx - ax, by - ay
    l2 = vx * vx + vy * vy
    if l2 == 0.0:
        return np.hypot(X - ax, Y - ay)
    t = np.clip(((X - ax) * vx + (Y - ay) * vy) / l2, 0.0, 1.0)
    return np.hypot(X - (ax + t * vx), Y - (ay + t * vy))


def ego_footprint(pose: Pose2D) -> RectPrim:
    """The ego vehicle's footprint rectangle at a pose."""
    return RectPrim(
        cx=pose.x,
        cy=pose.y,
        half_len=EGO_HALF_LEN,
        half_wid=EGO_HALF_WID,
        angle_rad=pose.heading_rad,
        class_id=int(ClassId.VEHICLE),
        height_m=EGO_HEIGHT,
    )


# -------------------------------------------------------------------- world


@dataclass(frozen=True)
class World:
    """Background plus ordered primitives; later entries occlude earlier."""

    extent_m: float
    seed: int
    primitives: tuple = ()
    background: int = int(ClassId.SIDEWALK)

    def class_at(self, x, y) -> np.ndarray:
        """Semantic class at arbitrary world points (vectorised)."""
        X = np.atleast_1d(np.asarray(x, dtype=np.float64))
        Y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        out = np.full(X.shape, self.background, dtype=np.uint8)
        for p in self.primitives:
            out[p.contains(X, Y)] = p.class_id
        return out

    def rasterize_semantics(self, gsd_m: float) -> np.ndarray:
        """Full-extent ground-truth raster, north up, west at column 0."""
        n = int(round(self.extent_m / gsd_m))
        xc = (np.arange(n, dtype=np.float64) + 0.5) * gsd_m
        yr = self.extent_m - (np.arange(n, dtype=np.float64) + 0.5) * gsd_m
        X = np.broadcast_to(xc[None, :], (n, n))
        Y = np.broadcast_to(yr[:, None], (n, n))

        def to_pixel(pts):
            u = pts[:, 0] / gsd_m - 0.5
            v = (self.extent_m - pts[:, 1]) / gsd_m - 0.5
            return u, v

        out = np.full((n, n), self.background, dtype=np.uint8)
        _paint_primitives(self.primitives, X, Y, to_pixel, out)
        return out

    def roads(self) -> list:
        return [
            p
            for p in self.primitives
            if isinstance(p, PolyPrim) and p.class_id == int(ClassId.ROAD)
        ]


def _paint_primitives(prims, X, Y, to_pixel, out) -> None:
    """Paint class codes into ``out``, restricting work to pixel bboxes."""
    h, w = out.shape
    for p in prims:
        x0, y0, x1, y1 = p.bbox()
        corners = np.array([[x0, y0], [x0, y1], [x1, y0], [x1, y1]])
        u, v = to_pixel(corners)
        c0 = max(int(math.floor(u.min())) - 1, 0)
        c1 = min(int(math.ceil(u.max())) + 2, w)
        r0 = max(int(math.floor(v.min())) - 1, 0)
        r1 = min(int(math.ceil(v.max())) + 2, h)
        if c0 >= c1 or r0 >= r1:
            continue
        sub = p.contains(X[r0:r1, c0:c1], Y[r0:r1, c0:c1])
        out[r0:r1, c0:c1][sub] = p.class_id


_DEFAULT_COUNTS = {"road": 2, "building": 10, "tree": 12, "vehicle": 6, "vru": 8}
_MAX_TRIES = 300


def generate_world(seed: int, extent_m: float = 260.0, counts: dict | None = None) -> World:
    """Lay out a random but reproducible scene.

    ``counts`` maps {road, building, tree, vehicle, vru} to how many of
    each to place.  The first road always runs from one side of the
    extent to the other.  Placement is rejection-sampled with bounded
    retries; running out raises :class:`PlacementError` naming the
    class that failed.
    """
    if not extent_m > 0:
        raise ValueError(f"extent_m must be positive, got {extent_m}")
    counts = dict(_DEFAULT_COUNTS if counts is None else counts)
    unknown = set(counts) - set(_DEFAULT_COUNTS)
    if unknown:
        raise ValueError(f"unknown primitive classes requested: {sorted(unknown)}")
    for k, v in counts.items():
        if v < 0:
            raise ValueError(f"negative count for {k}: {v}")

    rng = np.random.default_rng([seed, 0])
    ext = float(extent_m)
    prims: list = []

    # Roads first: the initial one spans the extent edge to edge.
    roads: list[PolyPrim] = []
    for i in range(counts.get("road", 0)):
        width = rng.uniform(6.0, 9.0)
        if i == 0:
            horizontal = rng.random() < 0.5
            lo = rng.uniform(0.25, 0.75) * ext
            hi = rng.uniform(0.25, 0.75) * ext
            mids = np.linspace(0.0, ext, 5)[1:-1]
            laterals = np.linspace(lo, hi, 5)[1:-1] + rng.uniform(-0.06, 0.06, 3) * ext
            if horizontal:
                pts = [(0.0, lo)] + [(m, l) for m, l in zip(mids, laterals)] + [(ext, hi)]
            else:
                pts = [(lo, 0.0)] + [(l, m) for m, l in zip(mids, laterals)] + [(hi, ext)]
        else:
            a = _random_edge_point(rng, ext)
            b = _random_edge_point(rng, ext)
            if math.hypot(b[0] - a[0], b[1] - a[1]) < 0.3 * ext:
                b = (ext - a[0], ext - a[1])
            pts = [a, ((a[0] + b[0]) / 2, (a[1] + b[1]) / 2), b]
            width = rng.uniform(4.0, 7.0)
        road = PolyPrim(tuple((float(x), float(y)) for x, y in pts), float(width), int(ClassId.ROAD), 0.0)
        roads.append(road)
        prims.append(road)

    def road_clearance(x, y) -> float:
        best = math.inf
        for r in roads:
            for (ax, ay), (bx, by) in r.segments():
                d = float(_dist_to_segment(np.float64(x), np.float64(y), ax, ay, bx, by))
                best = min(best, d - r.width / 2.0)
        return best

    buildings: list[RectPrim] = []
    for _ in range(counts.get("building", 0)):
        placed = False
        for _try in range(_MAX_TRIES):
            half_l = rng.uniform(4.0, 12.0)
            half_w = rng.uniform(3.0, 9.0)
            margin = math.hypot(half_l, half_w) + 0.5
            if 2 * margin >= ext:
                break
            cx = rng.uniform(margin, ext - margin)
            cy = rng.uniform(margin, ext - margin)
            if road_clearance(cx, cy) < math.hypot(half_l, half_w) + 1.0:
                continue
            if any(
                math.hypot(cx - b.cx, cy - b.cy) < b.circumradius + math.hypot(half_l, half_w) + 1.0
                for b in buildings
            ):
                continue
            b = RectPrim(cx, cy, half_l, half_w, rng.uniform(0, math.pi),
                         int(ClassId.BUILDING), rng.uniform(3.0, 15.0))
            buildings.append(b)
            prims.append(b)
            placed = True
            break
        if not placed:
            raise PlacementError(f"could not place building inside extent {ext} m")

    trees: list[DiscPrim] = []
    for _ in range(counts.get("tree", 0)):
        placed = False
        for _try in range(_MAX_TRIES):
            r = rng.uniform(1.5, 4.0)
            if 2 * (r + 0.5) >= ext:
                break
            cx = rng.uniform(r + 0.5, ext - r - 0.5)
            cy = rng.uniform(r + 0.5, ext - r - 0.5)
            if road_clearance(cx, cy) < r + 0.5:
                continue
            t = DiscPrim(cx, cy, r, int(ClassId.TREE), rng.uniform(4.5, 9.0))
            trees.append(t)
            prims.append(t)
            placed = True
            break
        if not placed:
            raise PlacementError(f"could not place tree inside extent {ext} m")

    segments = [seg for r in roads for seg in r.segments()]
    seg_roads = [r for r in roads for _ in r.segments()]
    vehicles: list[RectPrim] = []
    for _ in range(counts.get("vehicle", 0)):
        placed = False
        for _try in range(_MAX_TRIES):
            if segments:
                i = int(rng.integers(len(segments)))
                (ax, ay), (bx, by) = segments[i]
                width = seg_roads[i].width
                t = rng.uniform(0.1, 0.9)
                along = math.atan2(by - ay, bx - ax)
                lat_max = max(width / 2.0 - 1.3, 0.2)
                lat = rng.uniform(-lat_max, lat_max)
                cx = ax + t * (bx - ax) - math.sin(along) * lat
                cy = ay + t * (by - ay) + math.cos(along) * lat
                angle = along + rng.normal(0.0, 0.05)
            else:
                cx = rng.uniform(6.0, ext - 6.0)
                cy = rng.uniform(6.0, ext - 6.0)
                angle = rng.uniform(0, math.pi)
            if not (6.0 <= cx <= ext - 6.0 and 6.0 <= cy <= ext - 6.0):
                continue
            if any(math.hypot(cx - v.cx, cy - v.cy) < 6.0 for v in vehicles):
                continue
            if any(math.hypot(cx - t_.cx, cy - t_.cy) < 2.6 + t_.radius + 0.4 for t_ in trees):
                continue
            if any(math.hypot(cx - b.cx, cy - b.cy) < b.circumradius + 2.6 for b in buildings):
                continue
            v = RectPrim(cx, cy, 2.3, 1.0, angle, int(ClassId.VEHICLE), rng.uniform(1.2, 3.5))
            vehicles.append(v)
            prims.append(v)
            placed = True
            break
        if not placed:
            raise PlacementError(f"could not place vehicle inside extent {ext} m")

    vrus: list[DiscPrim] = []
    for _ in range(counts.get("vru", 0)):
        placed = False
        for _try in range(_MAX_TRIES):
            r = rng.uniform(0.25, 0.45)
            cx = rng.uniform(2.0, ext - 2.0)
            cy = rng.uniform(2.0, ext - 2.0)
            if any(math.hypot(cx - v.cx, cy - v.cy) < 2.6 + r + 0.4 for v in vehicles):
                continue
            p = DiscPrim(cx, cy, r, int(ClassId.VRU), rng.uniform(1.5, 2.0))
            vrus.append(p)
            prims.append(p)
            placed = True
            break
        if not placed:
            raise PlacementError(f"could not place vru inside extent {ext} m")

    return World(extent_m=ext, seed=int(seed), primitives=tuple(prims))


def _random_edge_point(rng, ext):
    edge = int(rng.integers(4))
    s = rng.uniform(0.0, ext)
    return [(s, 0.0), (ext, s), (s, ext), (0.0, s)][edge]


# ------------------------------------------------------------ aerial camera


@dataclass(frozen=True)
class CameraPose:
    """Nadir camera: ground point plus the bearing of image-up."""

    x: float
    y: float
    yaw_rad: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw_rad", normalize_heading(self.yaw_rad))


def camera_axes(yaw_rad: float) -> tuple[tuple[float, float], tuple[float, float]]:
    """World components of the image axes: (up, right).

    Trig values are snapped so quarter-turn yaws produce exact axes.
    """
    s = _snap_trig(math.sin(yaw_rad))
    c = _snap_trig(math.cos(yaw_rad))
    up = (s, c)
    right = (c, -s)
    return up, right


def heading_in_image(heading_rad: float, cam_yaw_rad: float) -> float:
    """Angle of a world heading inside the image plane.

    Measured counter-clockwise from the image's +u axis towards image-up,
    i.e. standard math convention in (u, up) coordinates.
    """
    fx = _snap_trig(math.cos(heading_rad))
    fy = _snap_trig(math.sin(heading_rad))
    (ux, uy), (rx, ry) = camera_axes(cam_yaw_rad)
    return math.atan2(fx * ux + fy * uy, fx * rx + fy * ry)


def pixel_of_world(cam: CameraPose, gsd_m: float, size_px: int, x, y):
    """Project world points through the nadir camera. Vectorised."""
    (ux, uy), (rx, ry) = camera_axes(cam.yaw_rad)
    cu = cv = (size_px - 1) / 2.0
    dx = np.asarray(x, dtype=np.float64) - cam.x
    dy = np.asarray(y, dtype=np.float64) - cam.y
    u = cu + (dx * rx + dy * ry) / gsd_m
    v = cv - (dx * ux + dy * uy) / gsd_m
    if u.ndim == 0:
        return float(u), float(v)
    return u, v


def world_of_pixel(cam: CameraPose, gsd_m: float, size_px: int, u, v):
    """Inverse of :func:`pixel_of_world`. Vectorised."""
    (ux, uy), (rx, ry) = camera_axes(cam.yaw_rad)
    cu = cv = (size_px - 1) / 2.0
    a = (np.asarray(u, dtype=np.float64) - cu) * gsd_m
    b = (cv - np.asarray(v, dtype=np.float64)) * gsd_m
    x = cam.x + a * rx + b * ux
    y = cam.y + a * ry + b * uy
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


@dataclass(frozen=True)
class AerialFrame:
    """One nadir shot: RGB, pixel-aligned ground truth, camera metadata."""

    image: np.ndarray
    gt_semantics: np.ndarray
    t_us: int
    cam: CameraPose
    gsd_m: float

    def __post_init__(self) -> None:
        img = np.asarray(self.image)
        gt = np.asarray(self.gt_semantics)
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise ValueError(f"image must be (H, W, 3) uint8, got {img.shape} {img.dtype}")
        if gt.shape != img.shape[:2]:
            raise ValueError(f"gt_semantics {gt.shape} must align with image {img.shape[:2]}")
        if not self.gsd_m > 0:
            raise ValueError(f"gsd_m must be positive, got {self.gsd_m}")
        img = img.copy()
        img.flags.writeable = False
        gt = np.array(gt, dtype=np.uint8, copy=True, order="C")
        gt.flags.writeable = False
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "gt_semantics", gt)

    @property
    def size_px(self) -> tuple[int, int]:
        return self.image.shape[:2]


def _hash01(ix, iy, seed: int) -> np.ndarray:
    """Uniform-ish [0, 1) lattice noise; identical for identical inputs."""
    h = ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
    h = h ^ (iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F))
    h = h ^ np.uint64((seed * 0xD6E8FEB86659FD93) & _MASK64)
    h = h ^ (h >> np.uint64(33))
    h = h * np.uint64(0xFF51AFD7ED558CCD)
    h = h ^ (h >> np.uint64(33))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _stamp_marker(img: np.ndarray, X: np.ndarray, Y: np.ndarray, ego: Pose2D, gsd_m: float, to_pixel) -> None:
    """Alpha-blend the two diagonal roof strokes into ``img`` in place."""
    h, w = img.shape[:2]
    half = MARKER_STROKE_LEN / 2.0
    reach = half + MARKER_STROKE_WIDTH + 2.0 * gsd_m
    corners = np.array(
        [[ego.x - reach, ego.y - reach], [ego.x - reach, ego.y + reach],
         [ego.x + reach, ego.y - reach], [ego.x + reach, ego.y + reach]]
    )
    u, v = to_pixel(corners)
    c0 = max(int(math.floor(u.min())) - 1, 0)
    c1 = min(int(math.ceil(u.max())) + 2, w)
    r0 = max(int(math.floor(v.min())) - 1, 0)
    r1 = min(int(math.ceil(v.max())) + 2, h)
    if c0 >= c1 or r0 >= r1:
        return
    Xs = X[r0:r1, c0:c1]
    Ys = Y[r0:r1, c0:c1]
    dist = np.full(Xs.shape, np.inf)
    for stroke in (ego.heading_rad + math.pi / 4.0, ego.heading_rad - math.pi / 4.0):
        dx = math.cos(stroke) * half
        dy = math.sin(stroke) * half
        dist = np.minimum(
            dist, _dist_to_segment(Xs, Ys, ego.x - dx, ego.y - dy, ego.x + dx, ego.y + dy)
        )
    alpha = np.clip((MARKER_STROKE_WIDTH / 2.0 + gsd_m / 2.0 - dist) / gsd_m, 0.0, 1.0)
    touched = alpha > 0
    if not touched.any():
        return
    a = alpha[touched][:, None]
    patch = img[r0:r1, c0:c1]
    blended = patch[touched] * (1.0 - a) + _MARKER_COLOR[None, :] * a
    patch[touched] = np.clip(np.floor(blended + 0.5), 0, 255)


def render_aerial(
    world: World,
    cam: CameraPose,
    gsd_m: float,
    size_px: int = 1200,
    *,
    ego_pose: Pose2D | None = None,
    t_us: int = 0,
) -> AerialFrame:
    """Orthographic top-down render with pixel-aligned ground truth.

    The ego vehicle, when given, is painted on top of the static world
    and its roof receives the X marker (in the RGB channels only; the
    ground truth keeps the plain vehicle class).
    """
    if not gsd_m > 0:
        raise ValueError(f"gsd_m must be positive, got {gsd_m}")
    (ux, uy), (rx, ry) = camera_axes(cam.yaw_rad)
    cu = cv = (size_px - 1) / 2.0
    a = (np.arange(size_px, dtype=np.float64) - cu) * gsd_m  # along +u
    b = (cv - np.arange(size_px, dtype=np.float64)) * gsd_m  # along image-up
    # X/Y are accumulated one axis term at a time so that renders taken a
    # quarter turn apart sample bit-identical world coordinates.
    X = (cam.x + a[None, :] * rx) + b[:, None] * ux
    Y = (cam.y + a[None, :] * ry) + b[:, None] * uy

    def to_pixel(pts):
        return pixel_of_world(cam, gsd_m, size_px, pts[:, 0], pts[:, 1])

    cls = np.full((size_px, size_px), world.background, dtype=np.uint8)
    prims = list(world.primitives)
    if ego_pose is not None:
        prims.append(ego_footprint(ego_pose))
    _paint_primitives(prims, X, Y, to_pixel, cls)

    shade = 0.78 + 0.44 * _hash01(
        np.floor(X / _TEX_SCALE), np.floor(Y / _TEX_SCALE), world.seed
    )
    img = np.clip(np.floor(_COLOR_LUT[cls] * shade[:, :, None] + 0.5), 0, 255)

    if ego_pose is not None:
        _stamp_marker(img, X, Y, ego_pose, gsd_m, to_pixel)

    return AerialFrame(
        image=img.astype(np.uint8),
        gt_semantics=cls,
        t_us=int(t_us),
        cam=cam,
        gsd_m=float(gsd_m),
    )


def render_marker_template(heading_image_rad: float, gsd_m: float, size_px: int | None = None) -> np.ndarray:
    """The X roof marker as seen in an image, for template matching.

    ``heading_image_rad`` is the vehicle heading expressed in image
    coordinates (see :func:`heading_in_image`).  Background is the flat
    ego roof color; only the strokes carry signal.
    """
    if size_px is None:
        size_px = int(math.ceil((MARKER_STROKE_LEN + 4.0 * gsd_m) / gsd_m))
        size_px += (size_px + 1) % 2  # keep it odd so the centre is a pixel
    c = (size_px - 1) / 2.0
    xs = (np.arange(size_px, dtype=np.float64) - c) * gsd_m
    ys = (c - np.arange(size_px, dtype=np.float64)) * gsd_m
    X = np.broadcast_to(xs[None, :], (size_px, size_px)).copy()
    Y = np.broadcast_to(ys[:, None], (size_px, size_px)).copy()
    base = _COLOR_LUT[int(ClassId.VEHICLE)]
    img = np.tile(base, (size_px, size_px, 1))

    def to_pixel(pts):
        return pts[:, 0] / gsd_m + c, c - pts[:, 1] / gsd_m

    _stamp_marker(img, X, Y, Pose2D(0.0, 0.0, heading_image_rad), gsd_m, to_pixel)
    return img.astype(np.uint8)


# -------------------------------------------------------------------- lidar


@dataclass(frozen=True)
class LidarSpec:
    """Scanner geometry: evenly spaced elevation channels, full azimuth."""

    channels: int = 16
    elev_min_deg: float = -14.0
    elev_max_deg: float = 6.0
    azimuth_step_deg: float = 1.0
    max_range_m: float = 60.0
    sensor_height_m: float = 1.8


@dataclass(frozen=True)
class LidarSweep:
    """Columns: x forward, y left (ego frame), z above ground, intensity, t_us."""

    points: np.ndarray
    sensor_id: str = "lidar_a"
    t_us: int = 0

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 5)
        if pts.ndim != 2 or pts.shape[1] != 5:
            raise ValueError(f"points must be (N, 5), got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points must be finite")
        pts = np.ascontiguousarray(pts)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def _solid_parts(prim):
    """Decompose a raised primitive into rects and discs for ray casting."""
    if isinstance(prim, (RectPrim, DiscPrim)):
        return [prim]
    parts = []
    for (ax, ay), (bx, by) in prim.segments():
        length = math.hypot(bx - ax, by - ay)
        if length > 0:
            parts.append(
                RectPrim((ax + bx) / 2, (ay + by) / 2, length / 2, prim.width / 2,
                         math.atan2(by - ay, bx - ax), prim.class_id, prim.height_m)
            )
    for px, py in prim.points:
        parts.append(DiscPrim(px, py, prim.width / 2, prim.class_id, prim.height_m))
    return parts


def _ray_interval(part, ox, oy, dx, dy):
    """Enter/exit parameters of 2D rays against one footprint.

    Returns (t_in, t_out); rays that miss get t_in = +inf, t_out = -inf.
    """
    n = ox.shape[0]
    if isinstance(part, RectPrim):
        ca, sa = math.cos(part.angle_rad), math.sin(part.angle_rad)
        rx_, ry_ = ox - part.cx, oy - part.cy
        t_in = np.full(n, -np.inf)
        t_out = np.full(n, np.inf)
        for o, d, h in (
            (rx_ * ca + ry_ * sa, dx * ca + dy * sa, part.half_len),
            (-rx_ * sa + ry_ * ca, -dx * sa + dy * ca, part.half_wid),
        ):
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = (-h - o) / d
                tb = (h - o) / d
            lo = np.minimum(ta, tb)
            hi = np.maximum(ta, tb)
            par = np.abs(d) < 1e-15
            inside = np.abs(o) <= h
            lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
            hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
            t_in = np.maximum(t_in, lo)
            t_out = np.minimum(t_out, hi)
    else:
        rx_, ry_ = ox - part.cx, oy - part.cy
        a = dx * dx + dy * dy
        bq = 2.0 * (rx_ * dx + ry_ * dy)
        cq = rx_ * rx_ + ry_ * ry_ - part.radius * part.radius
        disc = bq * bq - 4.0 * a * cq
        ok = (disc >= 0) & (a > 1e-18)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_in = np.where(ok, (-bq - sq) / (2 * a), np.inf)
            t_out = np.where(ok, (-bq + sq) / (2 * a), -np.inf)
    miss = t_out < t_in
    t_in = np.where(miss, np.inf, t_in)
    t_out = np.where(miss, -np.inf, t_out)
    return t_in, t_out


def simulate_lidar(
    world: World,
    ego_pose: Pose2D,
    spec: LidarSpec | None = None,
    *,
    t_us: int = 0,
    sensor_id: str = "lidar_a",
) -> LidarSweep:
    """Cast one sweep against the 2.5D world.

    Every ray keeps its nearest hit among primitive walls, primitive
    roofs, and the ground plane, so nearer structures occlude farther
    ones.  Ground returns carry z = 0 exactly; roof returns carry the
    primitive height exactly.
    """
    spec = spec or LidarSpec()
    if not (0.0 <= ego_pose.x <= world.extent_m and 0.0 <= ego_pose.y <= world.extent_m):
        raise ValueError(
            f"ego ({ego_pose.x:.1f}, {ego_pose.y:.1f}) outside world extent {world.extent_m} m"
        )
    elevs = np.deg2rad(np.linspace(spec.elev_min_deg, spec.elev_max_deg, spec.channels))
    azims = np.deg2rad(np.arange(0.0, 360.0, spec.azimuth_step_deg))
    el, az = np.meshgrid(elevs, azims, indexing="ij")
    el = el.ravel()
    az = az.ravel()
    n = el.shape[0]

    ch = np.cos(el)
    dirx = ch * np.cos(ego_pose.heading_rad + az)
    diry = ch * np.sin(ego_pose.heading_rad + az)
    dirz = np.sin(el)
    x0, y0, z0 = ego_pose.x, ego_pose.y, spec.sensor_height_m
    ox = np.full(n, x0)
    oy = np.full(n, y0)

    best_t = np.full(n, np.inf)
    best_z = np.zeros(n)

    def consider(t, z):
        nonlocal best_t, best_z
        ok = np.isfinite(t) & (t > 1e-9) & (t <= spec.max_range_m) & (t < best_t)
        best_t = np.where(ok, t, best_t)
        best_z = np.where(ok, z, best_z)

    # ground plane
    with np.errstate(divide="ignore"):
        tg = np.where(dirz < 0, -z0 / dirz, np.inf)
    consider(tg, np.zeros(n))

    for prim in world.primitives:
        if prim.height_m <= 0:
            continue
        for part in _solid_parts(prim):
            t_in, t_out = _ray_interval(part, ox, oy, dirx, diry)
            # wall: crossing the footprint boundary below the top
            zw = z0 + t_in * dirz
            wall_ok = np.isfinite(t_in) & (zw >= 0.0) & (zw <= prim.height_m)
            consider(np.where(wall_ok, t_in, np.inf), zw)
            # roof: descending onto the top surface inside the footprint
            with np.errstate(divide="ignore", invalid="ignore"):
                tr = (prim.height_m - z0) / dirz
            roof_ok = (
                np.isfinite(tr)
                & (tr >= np.maximum(t_in, 0.0) - 1e-12)
                & (tr <= t_out + 1e-12)
            )
            consider(np.where(roof_ok, tr, np.inf), np.full(n, prim.height_m))

    hit = np.isfinite(best_t)
    t = best_t[hit]
    wx = x0 + t * dirx[hit]
    wy = y0 + t * diry[hit]
    f, l = ego_pose.world_to_ego(wx, wy)
    intensity = 0.2 + 0.6 * _hash01(np.floor(wx / 0.05), np.floor(wy / 0.05), world.seed)
    pts = np.column_stack([f, l, best_z[hit], intensity, np.full(t.shape, float(t_us))])
    return LidarSweep(points=pts, sensor_id=sensor_id, t_us=int(t_us))


# -------------------------------------------------------------------- drive


@dataclass(frozen=True)
class Trajectory:
    """Constant-speed motion along a polyline, bouncing at the ends."""

    path: np.ndarray
    speed_mps: float

    def __post_init__(self) -> None:
        p = np.asarray(self.path, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 2:
            raise ValueError(f"path must be (M>=2, 2), got {p.shape}")
        seg = np.diff(p, axis=0)
        lens = np.hypot(seg[:, 0], seg[:, 1])
        if (lens <= 0).any():
            raise ValueError("path has zero-length segments")
        p = np.ascontiguousarray(p)
        p.flags.writeable = False
        cum = np.concatenate([[0.0], np.cumsum(lens)])
        cum.flags.writeable = False
        object.__setattr__(self, "path", p)
        object.__setattr__(self, "_cum", cum)

    @property
    def total_length_m(self) -> float:
        return float(self._cum[-1])

    def chainage_at(self, t_s: float) -> float:
        """Cumulative distance driven by time t (monotone in t)."""
        return self.speed_mps * float(t_s)

    def pose_at(self, t_s: float) -> Pose2D:
        length = self.total_length_m
        s_raw = self.chainage_at(t_s)
        lap, r = divmod(s_raw, length)
        forwardbound = int(lap) % 2 == 0
        s = r if forwardbound else length - r
        cum = self._cum
        i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(cum) - 2))
        seg = self.path[i + 1] - self.path[i]
        seg_len = cum[i + 1] - cum[i]
        frac = (s - cum[i]) / seg_len
        x, y = self.path[i] + frac * seg
        heading = math.atan2(seg[1], seg[0])
        if not forwardbound:
            heading += math.pi
        return Pose2D(float(x), float(y), heading)


@dataclass(frozen=True)
class AerialShot:
    cam: CameraPose
    gsd_m: float
    size_px: int


@dataclass(frozen=True)
class VehicleShot:
    pose: Pose2D


@dataclass(frozen=True)
class LidarShot:
    pose: Pose2D
    sensor_id: str


@dataclass(frozen=True)
class NavFix:
    x: float
    y: float
    heading_rad: float


@dataclass(frozen=True)
class SensorEvent:
    stream: str
    t_us: int
    payload: object


@dataclass(frozen=True)
class DriveLog:
    seed: int
    duration_s: float
    events: dict
    trajectory: Trajectory
    gnss_noise_m: float
    clock_jitter_us: int

    def stream_times(self, stream: str) -> np.ndarray:
        return np.array([e.t_us for e in self.events[stream]], dtype=np.int64)


def _event_times_s(rng, rate_hz: float, duration_s: float, jitter_us: int, align_phases: bool) -> np.ndarray:
    period = 1.0 / rate_hz
    jitter_s = min(jitter_us * 1e-6, 0.49 * period)
    phase = 0.0 if align_phases else rng.uniform(0.0, period)
    n = int(math.floor((duration_s - phase) / period)) + 1
    n = max(n, 1)
    base = phase + np.arange(n) * period
    if jitter_s > 0:
        base = base + rng.uniform(-jitter_s, jitter_s, n)
    return base + jitter_s  # shift keeps the first event non-negative


def simulate_drive(
    world: World,
    seed: int,
    duration_s: float = 60.0,
    rates: dict | None = None,
    clock_jitter_us: int = 2000,
    gnss_noise_m: float = 1.5,
    *,
    align_phases: bool = False,
    gsd_m: float | None = None,
    aerial_size_px: int = 1200,
    speed_mps: float = 8.0,
    heading_noise_rad: float = 0.01,
) -> DriveLog:
    """Roll the ego vehicle through the world and emit sensor events.

    Streams tick independently: each gets its own phase and bounded,
    per-event clock jitter.  GNSS fixes carry additive position noise
    and white heading noise; every other payload references the exact
    pose so downstream stages can be checked against truth.  Aerial
    shots hover near the vehicle with a random yaw each time.
    """
    rates = dict(DEFAULT_RATES_HZ if rates is None else rates)
    unknown = set(rates) - set(STREAMS)
    if unknown:
        raise ValueError(f"unknown streams: {sorted(unknown)}")
    for s, r in rates.items():
        if not r > 0:
            raise ValueError(f"rate for {s} must be positive, got {r}")

    roads = world.roads()
    if roads:
        path = np.asarray(roads[0].points, dtype=np.float64)
    else:
        e = world.extent_m
        path = np.array([[0.05 * e, 0.05 * e], [0.95 * e, 0.95 * e]])
    traj = Trajectory(path=path, speed_mps=float(speed_mps))

    events: dict[str, tuple] = {}
    for si, stream in enumerate(STREAMS):
        if stream not in rates:
            continue
        rng = np.random.default_rng([seed, 100 + si])
        t_s = _event_times_s(rng, rates[stream], duration_s, clock_jitter_us, align_phases)
        t_us = np.rint(t_s * 1e6).astype(np.int64)
        if (np.diff(t_us) <= 0).any():
            raise AssertionError(f"non-increasing timestamps in {stream}")

        if stream == "gnss_imu":
            noise_rng = np.random.default_rng([seed, 200])
            xy_noise = noise_rng.normal(0.0, gnss_noise_m, (len(t_s), 2))
            h_noise = noise_rng.normal(0.0, heading_noise_rad, len(t_s))
            evs = []
            for k, (ts, tu) in enumerate(zip(t_s, t_us)):
                pose = traj.pose_at(ts)
                evs.append(
                    SensorEvent(stream, int(tu), NavFix(
                        pose.x + xy_noise[k, 0], pose.y + xy_noise[k, 1],
                        normalize_heading(pose.heading_rad + h_noise[k]),
                    ))
                )
        elif stream == "aerial_rgb":
            shot_rng = np.random.default_rng([seed, 300])
            evs = []
            for ts, tu in zip(t_s, t_us):
                pose = traj.pose_at(ts)
                off = shot_rng.uniform(-15.0, 15.0, 2)
                yaw = shot_rng.uniform(0.0, 2.0 * math.pi)
                g = shot_rng.uniform(0.066, 0.074) if gsd_m is None else gsd_m
                cam = CameraPose(pose.x + off[0], pose.y + off[1], yaw)
                evs.append(SensorEvent(stream, int(tu), AerialShot(cam, float(g), aerial_size_px)))
        elif stream == "vehicle_rgb":
            evs = [
                SensorEvent(stream, int(tu), VehicleShot(traj.pose_at(ts)))
                for ts, tu in zip(t_s, t_us)
            ]
        else:  # lidar_a / lidar_b
            evs = [
                SensorEvent(stream, int(tu), LidarShot(traj.pose_at(ts), stream))
                for ts, tu in zip(t_s, t_us)
            ]
        events[stream] = tuple(evs)

    return DriveLog(
        seed=int(seed),
        duration_s=float(duration_s),
        events=events,
        trajectory=traj,
        gnss_noise_m=float(gnss_noise_m),
        clock_jitter_us=int(clock_jitter_us),
    )
