"""Alignment tests: exact temporal matching against a brute-force scan,
analytic projections, correlation matching, and BEV resampling."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossbev import crossview as cv
from crossbev import synthworld as sw
from crossbev.core import BevGridSpec, ClassId, Pose2D


# ----------------------------------------------------------------- oracles


def temporal_oracle(anchor, streams, max_offset_us):
    """Literal scan: nearest timestamp, first (earliest) wins ties."""

    def nearest(ts, ref):
        best_i = 0
        for i, t in enumerate(ts):
            if abs(t - ref) < abs(ts[best_i] - ref):
                best_i = i
        return best_i

    vt = list(streams[cv.REFERENCE_STREAM])
    if not vt:
        return None
    vi = nearest(vt, anchor)
    if abs(vt[vi] - anchor) > max_offset_us:
        return None
    times = {cv.REFERENCE_STREAM: vt[vi]}
    indices = {cv.REFERENCE_STREAM: vi}
    offsets = {cv.REFERENCE_STREAM: vt[vi] - anchor}
    for name, ts in streams.items():
        if name == cv.REFERENCE_STREAM:
            continue
        ts = list(ts)
        if not ts:
            return None
        i = nearest(ts, vt[vi])
        if abs(ts[i] - vt[vi]) > max_offset_us:
            return None
        times[name] = ts[i]
        indices[name] = i
        offsets[name] = ts[i] - vt[vi]
    return cv.TemporalMatch(anchor_t_us=anchor, times_us=times, indices=indices, offsets_us=offsets)


def ncc_map_oracle(window, template):
    """Nested-loop normalised cross correlation."""
    t0 = template - template.mean()
    sst = (t0**2).sum()
    th, tw = template.shape
    h, w = window.shape
    out = np.zeros((h - th + 1, w - tw + 1))
    for i in range(h - th + 1):
        for j in range(w - tw + 1):
            patch = window[i : i + th, j : j + tw]
            pz = patch - patch.mean()
            den = math.sqrt((pz**2).sum() * sst)
            out[i, j] = (pz * t0).sum() / den if den > 1e-9 else 0.0
    return out


# ----------------------------------------------------------------- timing


def test_worked_example_nearest_vehicle_frame():
    streams = {"vehicle_rgb": [940_000, 1_050_000]}
    m = cv.match_temporal(1_000_000, streams)
    assert m is not None
    assert m.times_us["vehicle_rgb"] == 1_050_000
    assert m.offsets_us["vehicle_rgb"] == 50_000


def test_exact_tie_prefers_earlier_timestamp():
    streams = {"vehicle_rgb": [950_000, 1_050_000]}
    m = cv.match_temporal(1_000_000, streams)
    assert m.times_us["vehicle_rgb"] == 950_000
    assert m.offsets_us["vehicle_rgb"] == -50_000


def test_offset_budget_is_inclusive():
    assert cv.match_temporal(1_000_000, {"vehicle_rgb": [1_100_000]}) is not None
    assert cv.match_temporal(1_000_000, {"vehicle_rgb": [1_100_001]}) is None


def test_stray_modality_discards_the_anchor():
    streams = {
        "vehicle_rgb": [1_000_000],
        "lidar_a": [1_110_000],  # 110 ms from the vehicle frame
    }
    assert cv.match_temporal(1_000_000, streams) is None


def test_other_streams_match_vehicle_not_anchor():
    # Vehicle frame sits 80 ms after the anchor; lidar is 170 ms after
    # the anchor but only 90 ms after the vehicle frame, so it stays.
    streams = {"vehicle_rgb": [1_080_000], "lidar_a": [1_170_000]}
    m = cv.match_temporal(1_000_000, streams)
    assert m is not None
    assert m.offsets_us["lidar_a"] == 90_000


def test_unsorted_stream_is_a_contract_violation():
    with pytest.raises(cv.UnsortedStreamError):
        cv.match_temporal(0, {"vehicle_rgb": [5, 3, 9]})
    with pytest.raises(cv.UnsortedStreamError):
        cv.match_temporal(0, {"vehicle_rgb": [3, 3, 9]})


def test_reference_stream_required_and_empty_streams_discard():
    with pytest.raises(ValueError):
        cv.match_temporal(0, {"lidar_a": [1, 2]})
    assert cv.match_temporal(0, {"vehicle_rgb": []}) is None
    assert cv.match_temporal(0, {"vehicle_rgb": [10], "lidar_a": []}) is None


@settings(max_examples=150, deadline=None)
@given(
    anchor=st.integers(0, 3_000_000),
    vt=st.lists(st.integers(0, 3_000_000), min_size=1, max_size=30, unique=True),
    lt=st.lists(st.integers(0, 3_000_000), min_size=1, max_size=30, unique=True),
    gt=st.lists(st.integers(0, 3_000_000), min_size=1, max_size=30, unique=True),
    budget=st.integers(0, 300_000),
)
def test_matching_equals_brute_force(anchor, vt, lt, gt, budget):
    streams = {
        "vehicle_rgb": sorted(vt),
        "lidar_a": sorted(lt),
        "gnss_imu": sorted(gt),
    }
    got = cv.match_temporal(anchor, streams, max_offset_us=budget)
    want = temporal_oracle(anchor, streams, budget)
    assert got == want
    if got is not None:
        assert all(abs(o) <= budget for o in got.offsets_us.values())


# -------------------------------------------------------------- projection


def _flat_frame(cam, gsd_m, size_px, fill=40):
    img = np.full((size_px, size_px, 3), fill, dtype=np.uint8)
    gt = np.zeros((size_px, size_px), dtype=np.uint8)
    return sw.AerialFrame(image=img, gt_semantics=gt, t_us=0, cam=cam, gsd_m=gsd_m)


def test_projection_worked_example_seven_metres_east():
    frame = _flat_frame(sw.CameraPose(100.0, 100.0, 0.0), 0.07, 300)
    u, v = cv.project_gnss_to_pixel(frame, 107.0, 100.0)
    assert u == pytest.approx(149.5 + 100.0)
    assert v == pytest.approx(149.5)


def test_projection_respects_camera_yaw():
    # With east up, a point north of the camera sits to the image left.
    frame = _flat_frame(sw.CameraPose(100.0, 100.0, math.pi / 2.0), 0.07, 300)
    u, v = cv.project_gnss_to_pixel(frame, 100.0, 107.0)
    assert u == pytest.approx(149.5 - 100.0)
    assert v == pytest.approx(149.5)


def test_projection_out_of_frame_carries_raw_pixels():
    frame = _flat_frame(sw.CameraPose(100.0, 100.0, 0.0), 0.07, 300)
    with pytest.raises(cv.ProjectionOutOfFrameError) as exc:
        cv.project_gnss_to_pixel(frame, 100.0 + 30.0, 100.0)
    assert exc.value.u == pytest.approx(149.5 + 30.0 / 0.07)
    assert exc.value.v == pytest.approx(149.5)


# ---------------------------------------------------------------- matching


def _planted_scene(seed=0, top=210, left=175):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(400, 400, 3), dtype=np.uint8)
    tpl = sw.render_marker_template(0.4, 0.07)
    th, tw = tpl.shape[:2]
    img[top : top + th, left : left + tw] = tpl
    center = (left + (tw - 1) / 2.0, top + (th - 1) / 2.0)
    return img, tpl, center


def test_planted_template_found_at_plant_site():
    img, tpl, (cu, cvv) = _planted_scene()
    m = cv.refine_by_template(img, (cu + 3.2, cvv - 4.1), tpl)
    assert m is not None
    assert m.ncc > 0.999
    assert m.confidence > 0.99
    assert abs(m.u - cu) < 0.35
    assert abs(m.v - cvv) < 0.35


def test_subpixel_refinement_interpolates_between_columns():
    rng = np.random.default_rng(3)
    base = rng.integers(0, 256, size=(200, 200), dtype=np.uint8).astype(np.float64)
    tpl = cv._to_gray(sw.render_marker_template(0.0, 0.07))
    th, tw = tpl.shape
    a = base.copy()
    b = base.copy()
    a[90 : 90 + th, 80 : 80 + tw] = tpl
    b[90 : 90 + th, 81 : 81 + tw] = tpl
    blend = (0.5 * a + 0.5 * b).astype(np.uint8)
    cu = 80 + (tw - 1) / 2.0
    m = cv.refine_by_template(blend, (cu, 90 + (th - 1) / 2.0), tpl)
    assert m is not None
    assert 0.15 <= m.u - cu <= 0.85


def test_flat_template_raises():
    img = np.random.default_rng(0).integers(0, 256, size=(100, 100), dtype=np.uint8)
    flat = np.full((15, 15), 77, dtype=np.uint8)
    with pytest.raises(cv.DegenerateTemplateError):
        cv.refine_by_template(img, (50, 50), flat)


def test_flat_image_never_matches():
    img = np.full((300, 300, 3), 128, dtype=np.uint8)
    tpl = sw.render_marker_template(0.4, 0.07)
    assert cv.refine_by_template(img, (150, 150), tpl) is None


def test_window_too_small_returns_none():
    img = np.random.default_rng(1).integers(0, 256, size=(20, 20), dtype=np.uint8)
    tpl = sw.render_marker_template(0.4, 0.07)  # 29 px, larger than the image
    assert cv.refine_by_template(img, (10, 10), tpl) is None


def test_anticorrelated_region_is_rejected():
    img, tpl, (cu, cvv) = _planted_scene(seed=5)
    inverted = (255 - img).astype(np.uint8)
    assert cv.refine_by_template(inverted, (cu, cvv), tpl) is None


def test_ncc_matches_nested_loop_oracle():
    rng = np.random.default_rng(7)
    win = rng.integers(0, 256, size=(40, 40)).astype(np.float64)
    tpl = rng.integers(0, 256, size=(7, 7)).astype(np.float64)
    oracle = ncc_map_oracle(win, tpl)
    oi, oj = np.unravel_index(np.argmax(oracle), oracle.shape)
    m = cv.refine_by_template(win, (20, 20), tpl, window_px=101, min_confidence=0.0)
    assert m is not None
    assert m.ncc == pytest.approx(oracle[oi, oj], abs=1e-7)
    assert abs(m.u - (oj + 3.0)) <= 0.5
    assert abs(m.v - (oi + 3.0)) <= 0.5


def test_noisy_scene_still_within_a_pixel():
    img, tpl, (cu, cvv) = _planted_scene(seed=11)
    rng = np.random.default_rng(12)
    noisy = np.clip(
        img.astype(np.float64) + rng.normal(0.0, 10.0, img.shape), 0, 255
    ).astype(np.uint8)
    m = cv.refine_by_template(noisy, (cu - 5.0, cvv + 6.0), tpl)
    assert m is not None
    assert abs(m.u - cu) <= 1.0
    assert abs(m.v - cvv) <= 1.0


# -------------------------------------------------------------- resampling


GRID = BevGridSpec()


@pytest.fixture(scope="module")
def centred_frame():
    world = sw.generate_world(17, extent_m=160.0,
                              counts={"road": 1, "building": 3, "tree": 3, "vehicle": 2, "vru": 3})
    ego = Pose2D(80.0, 75.0, math.pi / 2.0)
    cam = sw.CameraPose(80.0, 75.0, 0.0)
    frame = sw.render_aerial(world, cam, gsd_m=GRID.cell_m, size_px=1200, ego_pose=ego)
    return world, ego, frame


def test_centred_heading_up_crop_is_a_block_copy(centred_frame):
    _, ego, frame = centred_frame
    crop = cv.make_bev_crop(frame, (599.5, 599.5), ego.heading_rad, GRID)
    assert crop.valid.all()
    assert np.array_equal(crop.rgb, frame.image[300:900, 300:900])
    assert np.array_equal(crop.labels, frame.gt_semantics[300:900, 300:900])


def test_quarter_turn_crops_are_exact_rotations(centred_frame):
    _, ego, frame = centred_frame
    base = cv.make_bev_crop(frame, (599.5, 599.5), ego.heading_rad, GRID)
    for k in (1, 2, 3):
        turned = cv.make_bev_crop(
            frame, (599.5, 599.5), ego.heading_rad + k * (math.pi / 2.0), GRID
        )
        assert np.array_equal(turned.rgb, np.rot90(base.rgb, k=-k))
        assert np.array_equal(turned.labels, np.rot90(base.labels, k=-k))
        assert np.array_equal(turned.valid, np.rot90(base.valid, k=-k))


def test_point_five_metres_ahead_lands_72_cells_up():
    img = np.full((1200, 1200, 3), 30, dtype=np.uint8)
    img[528, 600] = (255, 0, 0)
    gt = np.zeros((1200, 1200), dtype=np.uint8)
    gt[528, 600] = int(ClassId.VEHICLE)
    frame = sw.AerialFrame(image=img, gt_semantics=gt, t_us=0,
                           cam=sw.CameraPose(0.0, 0.0, 0.0), gsd_m=GRID.cell_m)
    # vehicle at frame centre, heading up the image (north at yaw 0)
    crop = cv.make_bev_crop(frame, (599.5, 599.5), math.pi / 2.0, GRID)
    assert tuple(crop.rgb[228, 300]) == (255, 0, 0)
    assert crop.labels[228, 300] == int(ClassId.VEHICLE)
    assert GRID.ego_cell[0] - 228 == 72  # ~5 m at 0.07 m cells


def test_offframe_cells_are_masked_and_zero_filled():
    frame = _flat_frame(sw.CameraPose(0.0, 0.0, 0.0), 0.07, 300, fill=90)
    crop = cv.make_bev_crop(frame, (30.0, 30.0), 1.0, GRID)
    assert not crop.valid.all()
    assert crop.valid[300, 300]  # the ego cell itself is on-frame
    assert not crop.rgb[~crop.valid].any()
    assert (crop.labels[~crop.valid] == 255).all()
    assert (crop.labels[crop.valid] == 0).all()


def test_random_heading_crop_agrees_with_world_lookup(centred_frame):
    world, ego, frame = centred_frame
    rng = np.random.default_rng(23)
    for heading in rng.uniform(0.0, 2.0 * math.pi, 3):
        pose = Pose2D(ego.x, ego.y, float(heading))
        crop = cv.make_bev_crop(frame, (599.5, 599.5), pose.heading_rad, GRID)
        idx = np.arange(GRID.size_px, dtype=np.float64)
        fwd, left = GRID.grid_to_ego(idx + 0.5, idx + 0.5)
        f2 = np.broadcast_to(fwd[:, None], (600, 600))
        l2 = np.broadcast_to(left[None, :], (600, 600))
        wx, wy = pose.ego_to_world(f2.ravel(), l2.ravel())
        want = world.class_at(wx, wy).reshape(600, 600)
        ego_mask = sw.ego_footprint(ego).contains(wx, wy).reshape(600, 600)
        want[ego_mask] = int(ClassId.VEHICLE)
        agree = (crop.labels == want)[crop.valid].mean()
        assert agree > 0.95, f"heading {heading:.3f}: agreement {agree:.4f}"


def test_crop_validators_fire():
    n = BevGridSpec(extent_m=0.7, size_px=10)
    rgb = np.zeros((10, 10, 3), dtype=np.uint8)
    lab = np.full((10, 10), 255, dtype=np.uint8)
    val = np.zeros((10, 10), dtype=bool)
    rgb_bad = rgb.copy()
    rgb_bad[0, 0] = 9
    with pytest.raises(ValueError):
        cv.BevCrop(rgb=rgb_bad, labels=lab, valid=val, ego_pixel=(0, 0), heading_rad=0.0, grid=n)
    lab_bad = lab.copy()
    lab_bad[0, 0] = 3
    with pytest.raises(ValueError):
        cv.BevCrop(rgb=rgb, labels=lab_bad, valid=val, ego_pixel=(0, 0), heading_rad=0.0, grid=n)


# ------------------------------------------------------------------ sample


def test_aligned_sample_enforces_contract():
    ok = cv.AlignedSample(
        anchor_t_us=1_000_000,
        ego_pose=Pose2D(1.0, 2.0, 0.3),
        ego_pixel=(599.5, 401.25),
        match_confidence=0.9,
        offsets_us={"vehicle_rgb": 40_000, "lidar_a": -100_000},
    )
    assert ok.ego_pixel == (599.5, 401.25)
    with pytest.raises(ValueError):
        cv.AlignedSample(1, Pose2D(0, 0), (0, 0), 0.5, {})
    with pytest.raises(ValueError):
        cv.AlignedSample(1, Pose2D(0, 0), (0, 0), 0.9, {"lidar_a": 100_001})
    with pytest.raises(ValueError):
        cv.AlignedSample(1, Pose2D(0, 0), (math.nan, 0), 0.9, {})
