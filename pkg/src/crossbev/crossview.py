"""Pairing vehicle logs with aerial frames.

Three steps turn an aerial shot into vehicle-centred supervision:

1. temporal matching: pick the vehicle frame nearest the aerial anchor,
   then snap every other modality to that vehicle frame, all within a
   hard offset budget;
2. spatial matching: project the GNSS fix through the nadir camera for
   a prior, then localise the ego roof marker by normalised cross
   correlation with sub-pixel (parabolic) refinement;
3. resampling: bilinearly warp the aerial RGB into the heading-up BEV
   grid around the matched pixel, with nearest-neighbour semantics and
   a validity mask for cells that fall off the frame.

Offsets are kept in integer microseconds throughout so matching is
exact; no float timestamps appear anywhere in this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .core import BevGridSpec, Pose2D, _snap_trig
from .synthworld import AerialFrame, heading_in_image, pixel_of_world

MAX_OFFSET_US = 100_000
MIN_MATCH_CONFIDENCE = 0.65

REFERENCE_STREAM = "vehicle_rgb"

# Sum of squared deviations under which a window is considered textureless.
_FLAT_SS = 0.5


class UnsortedStreamError(ValueError):
    """A modality's timestamps were not strictly increasing."""


class DegenerateTemplateError(ValueError):
    """The matching template has no variance to correlate against."""


class ProjectionOutOfFrameError(ValueError):
    """GNSS prior projected outside the aerial frame.

    Carries the raw continuous pixel coordinates in ``u`` and ``v``.
    """

    def __init__(self, u: float, v: float, size_px: tuple[int, int]):
        self.u = float(u)
        self.v = float(v)
        super().__init__(
            f"projected pixel ({self.u:.2f}, {self.v:.2f}) outside {size_px[1]}x{size_px[0]} frame"
        )


# ------------------------------------------------------------------- timing


@dataclass(frozen=True)
class TemporalMatch:
    """Per-stream picks for one anchor; offsets are exact integer µs.

    The vehicle offset is measured against the anchor; every other
    stream's offset is measured against the matched vehicle time.
    """

    anchor_t_us: int
    times_us: dict
    indices: dict
    offsets_us: dict


def _nearest_index(times: np.ndarray, ref: int) -> int:
    """Index of the timestamp closest to ref; ties go to the earlier one."""
    i = int(np.searchsorted(times, ref))
    if i == 0:
        return 0
    if i == len(times):
        return len(times) - 1
    before = int(times[i - 1])
    after = int(times[i])
    if ref - before <= after - ref:
        return i - 1
    return i


def match_temporal(
    anchor_t_us: int,
    streams: dict,
    max_offset_us: int = MAX_OFFSET_US,
) -> TemporalMatch | None:
    """Match one aerial anchor against per-modality timestamp arrays.

    ``streams`` must include :data:`REFERENCE_STREAM`.  The vehicle
    frame nearest the anchor becomes the reference; each remaining
    stream contributes its timestamp nearest that reference.  If any
    pick (the reference included) lands farther than ``max_offset_us``
    (inclusive bound), the whole anchor is discarded and None is
    returned.  Non-increasing timestamps raise
    :class:`UnsortedStreamError`.
    """
    if REFERENCE_STREAM not in streams:
        raise ValueError(f"streams must include {REFERENCE_STREAM!r}")
    arrays = {}
    for name, ts in streams.items():
        t = np.asarray(ts, dtype=np.int64)
        if t.ndim != 1:
            raise ValueError(f"stream {name!r} must be a 1-D timestamp array")
        if t.size == 0:
            return None
        if t.size > 1 and (np.diff(t) <= 0).any():
            raise UnsortedStreamError(f"stream {name!r} timestamps are not strictly increasing")
        arrays[name] = t

    anchor = int(anchor_t_us)
    vt = arrays[REFERENCE_STREAM]
    vi = _nearest_index(vt, anchor)
    v_time = int(vt[vi])
    v_off = v_time - anchor
    if abs(v_off) > max_offset_us:
        return None

    times = {REFERENCE_STREAM: v_time}
    indices = {REFERENCE_STREAM: vi}
    offsets = {REFERENCE_STREAM: v_off}
    for name, t in arrays.items():
        if name == REFERENCE_STREAM:
            continue
        i = _nearest_index(t, v_time)
        off = int(t[i]) - v_time
        if abs(off) > max_offset_us:
            return None
        times[name] = int(t[i])
        indices[name] = i
        offsets[name] = off
    return TemporalMatch(anchor_t_us=anchor, times_us=times, indices=indices, offsets_us=offsets)


# --------------------------------------------------------------- projection


def project_gnss_to_pixel(frame: AerialFrame, x: float, y: float) -> tuple[float, float]:
    """Continuous pixel coordinates of a world position in a frame.

    Raises :class:`ProjectionOutOfFrameError` (carrying the raw pixel
    values) when the position falls outside the pixel-centre grid.
    """
    h, w = frame.size_px
    if h != w:
        raise ValueError(f"frames must be square, got {h}x{w}")
    u, v = pixel_of_world(frame.cam, frame.gsd_m, w, float(x), float(y))
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        raise ProjectionOutOfFrameError(u, v, frame.size_px)
    return u, v


# ----------------------------------------------------------------- matching


@dataclass(frozen=True)
class TemplateMatch:
    """Sub-pixel marker location with its correlation score."""

    u: float
    v: float
    confidence: float
    ncc: float


def _to_gray(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        return a.mean(axis=2)
    if a.ndim == 2:
        return a
    raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {a.shape}")


def _window_sums(a: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Sliding-window sums over all (th, tw) placements, via integral image."""
    s = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    s[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    return s[th:, tw:] - s[:-th, tw:] - s[th:, :-tw] + s[:-th, :-tw]


def _parabolic_shift(lo: float, mid: float, hi: float) -> float:
    denom = lo - 2.0 * mid + hi
    if denom >= -1e-12:
        return 0.0
    shift = 0.5 * (lo - hi) / denom
    return float(np.clip(shift, -0.5, 0.5))


def refine_by_template(
    image,
    prior_uv: tuple[float, float],
    template,
    *,
    window_px: int = 301,
    min_confidence: float = MIN_MATCH_CONFIDENCE,
) -> TemplateMatch | None:
    """Localise ``template`` near a prior pixel by normalised correlation.

    The correlation peak gets an independent parabolic refinement along
    each axis.  Scores map to [0, 1] via (ncc + 1) / 2 and anything
    below ``min_confidence`` returns None.  Textureless windows score
    zero, so featureless imagery can never produce a match; a template
    without variance raises :class:`DegenerateTemplateError`.
    """
    gray = _to_gray(image)
    tpl = _to_gray(template)
    th, tw = tpl.shape
    tpl_zero = tpl - tpl.mean()
    ss_t = float((tpl_zero**2).sum())
    if ss_t <= _FLAT_SS:
        raise DegenerateTemplateError("template has (near-)zero variance")

    h, w = gray.shape
    half = window_px // 2
    pu, pv = float(prior_uv[0]), float(prior_uv[1])
    r0 = max(int(round(pv)) - half, 0)
    r1 = min(int(round(pv)) + half + 1, h)
    c0 = max(int(round(pu)) - half, 0)
    c1 = min(int(round(pu)) + half + 1, w)
    if r1 - r0 < th or c1 - c0 < tw:
        return None
    win = gray[r0:r1, c0:c1]

    num = fftconvolve(win, tpl_zero[::-1, ::-1], mode="valid")
    s1 = _window_sums(win, th, tw)
    s2 = _window_sums(win * win, th, tw)
    ss_w = np.maximum(s2 - s1 * s1 / (th * tw), 0.0)
    textured = ss_w > _FLAT_SS
    with np.errstate(divide="ignore", invalid="ignore"):
        ncc = np.where(textured, num / np.sqrt(ss_w * ss_t), 0.0)
    ncc = np.clip(ncc, -1.0, 1.0)

    pi, pj = np.unravel_index(int(np.argmax(ncc)), ncc.shape)
    peak = float(ncc[pi, pj])
    confidence = (peak + 1.0) / 2.0
    if confidence < min_confidence:
        return None

    dv = du = 0.0
    if 0 < pi < ncc.shape[0] - 1:
        dv = _parabolic_shift(ncc[pi - 1, pj], peak, ncc[pi + 1, pj])
    if 0 < pj < ncc.shape[1] - 1:
        du = _parabolic_shift(ncc[pi, pj - 1], peak, ncc[pi, pj + 1])

    u = c0 + pj + (tw - 1) / 2.0 + du
    v = r0 + pi + (th - 1) / 2.0 + dv
    return TemplateMatch(u=float(u), v=float(v), confidence=confidence, ncc=peak)


# --------------------------------------------------------------- resampling


@dataclass(frozen=True)
class BevCrop:
    """Heading-up BEV resample of one aerial frame.

    Cells that sample outside the source frame are invalid: RGB is
    zero-filled and labels carry the void code there.
    """

    rgb: np.ndarray
    labels: np.ndarray
    valid: np.ndarray
    ego_pixel: tuple
    heading_rad: float
    grid: BevGridSpec

    def __post_init__(self) -> None:
        rgb = np.asarray(self.rgb)
        lab = np.asarray(self.labels)
        val = np.asarray(self.valid)
        n = self.grid.size_px
        if rgb.shape != (n, n, 3) or rgb.dtype != np.uint8:
            raise ValueError(f"rgb must be ({n}, {n}, 3) uint8")
        if lab.shape != (n, n) or lab.dtype != np.uint8:
            raise ValueError(f"labels must be ({n}, {n}) uint8")
        if val.shape != (n, n) or val.dtype != np.bool_:
            raise ValueError(f"valid must be ({n}, {n}) bool")
        if rgb[~val].any():
            raise ValueError("rgb must be zero outside the valid mask")
        if lab[~val].size and (lab[~val] != 255).any():
            raise ValueError("labels must be void outside the valid mask")
        rgb, lab, val = rgb.copy(), lab.copy(), val.copy()
        for a in (rgb, lab, val):
            a.flags.writeable = False
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "valid", val)
        object.__setattr__(self, "ego_pixel", (float(self.ego_pixel[0]), float(self.ego_pixel[1])))


def _bilinear_rgb(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    c0 = np.clip(u0.astype(np.int64), 0, w - 1)
    c1 = np.clip(c0 + 1, 0, w - 1)
    r0 = np.clip(v0.astype(np.int64), 0, h - 1)
    r1 = np.clip(r0 + 1, 0, h - 1)
    f = img.astype(np.float64)
    top = f[r0, c0] * (1.0 - fu) + f[r0, c1] * fu
    bot = f[r1, c0] * (1.0 - fu) + f[r1, c1] * fu
    return top * (1.0 - fv) + bot * fv


def make_bev_crop(
    frame: AerialFrame,
    ego_pixel: tuple[float, float],
    heading_rad: float,
    grid: BevGridSpec | None = None,
) -> BevCrop:
    """Warp an aerial frame into the vehicle-centred heading-up grid.

    RGB is sampled bilinearly, semantics nearest-neighbour from the
    frame's label plane.  ``ego_pixel`` is the (sub-pixel) image
    location of the vehicle; ``heading_rad`` its world heading.
    """
    grid = grid or BevGridSpec()
    n = grid.size_px
    h, w = frame.size_px

    alpha = heading_in_image(heading_rad, frame.cam.yaw_rad)
    ca = _snap_trig(math.cos(alpha))
    sa = _snap_trig(math.sin(alpha))

    idx = np.arange(n, dtype=np.float64)
    fwd, left = grid.grid_to_ego(idx + 0.5, idx + 0.5)
    f2 = fwd[:, None]
    l2 = left[None, :]
    du = (f2 * ca - l2 * sa) / frame.gsd_m
    dv = -(f2 * sa + l2 * ca) / frame.gsd_m
    u = ego_pixel[0] + du
    v = ego_pixel[1] + dv

    valid = (u >= 0.0) & (u <= w - 1) & (v >= 0.0) & (v <= h - 1)

    rgb = _bilinear_rgb(frame.image, u, v)
    rgb = np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)
    rgb[~valid] = 0

    labels = np.full((n, n), 255, dtype=np.uint8)
    ui = np.rint(u[valid]).astype(np.int64)
    vi = np.rint(v[valid]).astype(np.int64)
    labels[valid] = frame.gt_semantics[vi, ui]

    return BevCrop(
        rgb=rgb,
        labels=labels,
        valid=valid,
        ego_pixel=(float(ego_pixel[0]), float(ego_pixel[1])),
        heading_rad=float(heading_rad),
        grid=grid,
    )


# ------------------------------------------------------------------ sample


@dataclass(frozen=True)
class AlignedSample:
    """One accepted aerial-vehicle pairing.

    Construction enforces the pairing contract: every modality offset
    within the budget and a marker match at or above the confidence
    floor.
    """

    anchor_t_us: int
    ego_pose: Pose2D
    ego_pixel: tuple
    match_confidence: float
    offsets_us: dict

    def __post_init__(self) -> None:
        if not (MIN_MATCH_CONFIDENCE <= self.match_confidence <= 1.0):
            raise ValueError(
                f"match_confidence {self.match_confidence} outside "
                f"[{MIN_MATCH_CONFIDENCE}, 1.0]"
            )
        for name, off in self.offsets_us.items():
            if abs(int(off)) > MAX_OFFSET_US:
                raise ValueError(f"offset for {name} is {off} us, over {MAX_OFFSET_US}")
        u, v = self.ego_pixel
        if not (math.isfinite(u) and math.isfinite(v)):
            raise ValueError("ego_pixel must be finite")
        object.__setattr__(self, "ego_pixel", (float(u), float(v)))
        object.__setattr__(self, "anchor_t_us", int(self.anchor_t_us))
