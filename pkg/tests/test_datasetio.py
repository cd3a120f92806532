import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from crossbev.datasetio import (
    BadMagicError,
    ChecksumError,
    CorruptFileError,
    MANIFEST_FIELDS,
    SEMANTIC_PALETTE,
    TruncatedFileError,
    VOID_COLOR,
    load_semantics_png,
    read_bevr,
    read_event_log,
    read_jsonl,
    read_manifest,
    read_points,
    save_semantics_png,
    split_by_trajectory,
    validate_manifest,
    write_bevr,
    write_event_log,
    write_jsonl,
    write_manifest,
    write_points,
)


def crc(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def assert_every_byte_flip_detected(path, reader):
    """Flip each byte two ways and insist the reader refuses the file."""
    good = path.read_bytes()
    assert reader(path) is not None
    for off in range(len(good)):
        for flip in (0xFF, 0x01):
            bad = bytearray(good)
            bad[off] ^= flip
            path.write_bytes(bytes(bad))
            with pytest.raises(CorruptFileError) as err:
                reader(path)
            assert isinstance(err.value.offset, int)
            assert err.value.offset >= 0
    path.write_bytes(good)


# ------------------------------------------------------------------- raster


class TestBevrContainer:
    def test_header_layout_matches_hand_packed_bytes(self, tmp_path):
        p = tmp_path / "a.bevr"
        occ = np.arange(12, dtype=np.uint16).reshape(3, 4)
        cnt = (occ * 7 + 1).astype(np.uint16)
        n = write_bevr(p, {"occ": occ, "cnt": cnt})
        buf = p.read_bytes()
        assert n == len(buf)

        head = b"BEVR" + struct.pack("<HHIIB", 1, 2, 3, 4, 1)
        head += struct.pack("<H", 3) + b"occ" + struct.pack("<H", 3) + b"cnt"
        expect = head + struct.pack("<I", crc(head))
        for a in (occ, cnt):
            payload = a.astype("<u2").tobytes()
            expect += payload + struct.pack("<I", crc(payload))
        assert buf == expect

    @pytest.mark.parametrize("dtype", [np.uint8, np.uint16, np.float32])
    def test_round_trip_is_exact(self, tmp_path, dtype):
        rng = np.random.default_rng(3)
        if dtype is np.float32:
            chans = {
                "height": rng.normal(size=(17, 9)).astype(np.float32),
                "density": rng.random((17, 9)).astype(np.float32),
            }
        else:
            info = np.iinfo(dtype)
            chans = {
                "height": rng.integers(0, info.max, (17, 9)).astype(dtype),
                "density": rng.integers(0, info.max, (17, 9)).astype(dtype),
            }
        p = tmp_path / "rt.bevr"
        write_bevr(p, chans)
        back = read_bevr(p)
        assert list(back) == ["height", "density"]
        for name in chans:
            assert back[name].dtype == np.dtype(dtype)
            assert back[name].tobytes() == chans[name].tobytes()

    def test_float_payload_preserves_nan_and_inf_bits(self, tmp_path):
        a = np.array([[np.nan, np.inf], [-np.inf, -0.0]], dtype=np.float32)
        p = tmp_path / "nan.bevr"
        write_bevr(p, {"x": a})
        back = read_bevr(p)["x"]
        assert back.tobytes() == a.tobytes()

    def test_write_is_deterministic(self, tmp_path):
        a = np.random.default_rng(5).integers(0, 255, (8, 8)).astype(np.uint8)
        p1, p2 = tmp_path / "one.bevr", tmp_path / "two.bevr"
        write_bevr(p1, {"m": a})
        write_bevr(p2, {"m": a})
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_bad_channel_sets(self, tmp_path):
        p = tmp_path / "bad.bevr"
        ok = np.zeros((2, 2), dtype=np.uint8)
        with pytest.raises(ValueError, match="at least one"):
            write_bevr(p, {})
        with pytest.raises(ValueError, match="2-D"):
            write_bevr(p, {"a": np.zeros(4, dtype=np.uint8)})
        with pytest.raises(ValueError, match="non-empty"):
            write_bevr(p, {"a": np.zeros((0, 3), dtype=np.uint8)})
        with pytest.raises(ValueError, match="name"):
            write_bevr(p, {"": ok})
        with pytest.raises(ValueError, match="unsupported dtype"):
            write_bevr(p, {"a": np.zeros((2, 2), dtype=np.float64)})
        with pytest.raises(ValueError, match="disagrees"):
            write_bevr(p, {"a": ok, "b": np.zeros((2, 3), dtype=np.uint8)})
        with pytest.raises(ValueError, match="disagrees"):
            write_bevr(p, {"a": ok, "b": np.zeros((2, 2), dtype=np.uint16)})

    def test_every_single_byte_corruption_detected(self, tmp_path):
        p = tmp_path / "c.bevr"
        rng = np.random.default_rng(11)
        write_bevr(
            p,
            {
                "occ": rng.integers(0, 255, (3, 4)).astype(np.uint8),
                "cnt": rng.integers(0, 255, (3, 4)).astype(np.uint8),
            },
        )
        assert_every_byte_flip_detected(p, read_bevr)

    def test_every_truncation_detected(self, tmp_path):
        p = tmp_path / "t.bevr"
        write_bevr(p, {"m": np.arange(6, dtype=np.uint8).reshape(2, 3)})
        good = p.read_bytes()
        for cut in range(len(good)):
            p.write_bytes(good[:cut])
            with pytest.raises(CorruptFileError):
                read_bevr(p)
        p.write_bytes(good + b"\x00")
        with pytest.raises(CorruptFileError, match="trailing"):
            read_bevr(p)

    def test_error_classes_and_offsets(self, tmp_path):
        p = tmp_path / "e.bevr"
        write_bevr(p, {"m": np.arange(6, dtype=np.uint8).reshape(2, 3)})
        good = p.read_bytes()

        bad = bytearray(good)
        bad[0] ^= 0xFF
        p.write_bytes(bytes(bad))
        with pytest.raises(BadMagicError) as err:
            read_bevr(p)
        assert err.value.offset == 0

        bad = bytearray(good)
        bad[-5] ^= 0xFF  # inside the only payload
        p.write_bytes(bytes(bad))
        with pytest.raises(ChecksumError, match="'m'"):
            read_bevr(p)

        p.write_bytes(good[: len(good) // 2])
        with pytest.raises(TruncatedFileError):
            read_bevr(p)


# ------------------------------------------------------------------- points


class TestPointRecords:
    def test_record_layout_matches_hand_packed_bytes(self, tmp_path):
        p = tmp_path / "one.pcrd"
        n = write_points(
            p,
            xyz=[(1.5, -2.25, 0.125)],
            intensity=[0.5],
            t_us=[7_000_003],
            classes=[4],
        )
        buf = p.read_bytes()
        assert n == len(buf) == 4 + 2 + 8 + 4 + 25 + 4

        head = b"PCRD" + struct.pack("<HQ", 1, 1)
        rec = struct.pack("<ffffQB", 1.5, -2.25, 0.125, 0.5, 7_000_003, 4)
        assert buf == head + struct.pack("<I", crc(head)) + rec + struct.pack("<I", crc(rec))

    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(2)
        n = 1000
        xyz = rng.normal(scale=30.0, size=(n, 3)).astype(np.float32)
        inten = rng.random(n).astype(np.float32)
        t = rng.integers(0, 2**62, n).astype(np.uint64)
        t[0] = np.uint64(2**63 + 11)
        cls = rng.choice(np.array([0, 1, 2, 3, 4, 254, 255], dtype=np.uint8), n)

        p = tmp_path / "rt.pcrd"
        write_points(p, xyz, inten, t, cls)
        back = read_points(p)
        assert len(back) == n
        assert back.xyz.tobytes() == xyz.tobytes()
        assert back.intensity.tobytes() == inten.tobytes()
        assert np.array_equal(back.t_us, t)
        assert np.array_equal(back.classes, cls)
        assert not back.xyz.flags.writeable

    def test_omitted_classes_mean_unlabeled(self, tmp_path):
        p = tmp_path / "u.pcrd"
        write_points(p, np.zeros((3, 3)), np.zeros(3), [1, 2, 3])
        assert np.array_equal(read_points(p).classes, [255, 255, 255])

    def test_empty_cloud_round_trips(self, tmp_path):
        p = tmp_path / "empty.pcrd"
        write_points(p, np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))
        assert len(read_points(p)) == 0

    def test_rejects_bad_inputs(self, tmp_path):
        p = tmp_path / "bad.pcrd"
        with pytest.raises(ValueError, match=r"\(N, 3\)"):
            write_points(p, np.zeros((4, 2)), np.zeros(4), np.zeros(4, dtype=int))
        with pytest.raises(ValueError, match="finite"):
            write_points(p, [[np.nan, 0, 0]], [0.0], [0])
        with pytest.raises(ValueError, match="integer"):
            write_points(p, [[0, 0, 0]], [0.0], [1.5])
        with pytest.raises(ValueError, match="non-negative"):
            write_points(p, [[0, 0, 0]], [0.0], [-4])
        with pytest.raises(ValueError, match="uint8"):
            write_points(p, [[0, 0, 0]], [0.0], [0], classes=[300])

    def test_every_single_byte_corruption_detected(self, tmp_path):
        p = tmp_path / "c.pcrd"
        write_points(
            p,
            xyz=[(1.0, 2.0, 3.0), (-4.0, 5.5, 0.25)],
            intensity=[0.3, 0.9],
            t_us=[10, 20],
            classes=[0, 254],
        )
        assert_every_byte_flip_detected(p, read_points)


# -------------------------------------------------------------------- jsonl


class TestChecksummedJsonl:
    def test_line_layout_is_checksummed_canonical_json(self, tmp_path):
        p = tmp_path / "m.jsonl"
        write_jsonl(p, [{"b": 1, "a": "x"}])
        data = b'{"a":"x","b":1}'
        assert p.read_bytes() == f"{crc(data):08x} ".encode() + data + b"\n"

    def test_round_trip(self, tmp_path):
        records = [
            {"id": "s0", "vals": [1, 2.5, None, True], "nested": {"k": "été"}},
            {"id": "s1", "neg": -0.125, "big": 2**53},
        ]
        p = tmp_path / "rt.jsonl"
        write_jsonl(p, records)
        assert read_jsonl(p) == records

    def test_empty_file_round_trips(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        write_jsonl(p, [])
        assert p.read_bytes() == b""
        assert read_jsonl(p) == []

    @settings(max_examples=50, deadline=None)
    @given(
        records=st.lists(
            st.dictionaries(
                st.text(max_size=8),
                st.recursive(
                    st.none()
                    | st.booleans()
                    | st.integers(-(10**12), 10**12)
                    | st.floats(allow_nan=False, allow_infinity=False)
                    | st.text(max_size=12),
                    lambda kids: st.lists(kids, max_size=3)
                    | st.dictionaries(st.text(max_size=6), kids, max_size=3),
                    max_leaves=8,
                ),
                max_size=4,
            ),
            max_size=5,
        )
    )
    def test_round_trip_property(self, tmp_path_factory, records):
        p = tmp_path_factory.mktemp("jl") / "p.jsonl"
        write_jsonl(p, records)
        assert read_jsonl(p) == records

    def test_every_single_byte_corruption_detected(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_jsonl(p, [{"a": 1, "b": "two"}, {"c": [3, 4]}])
        assert_every_byte_flip_detected(p, lambda q: read_jsonl(q) or True)


class TestEventLogAndManifest:
    def test_event_log_round_trip(self, tmp_path):
        events = [
            {"stream": "vehicle_rgb", "t_us": 100_000, "pose": [1.0, 2.0, 0.5]},
            {"stream": "lidar_a", "t_us": 105_000, "sensor_id": "lidar_a"},
        ]
        p = tmp_path / "ev.jsonl"
        write_event_log(p, events)
        assert read_event_log(p) == events

    def test_event_log_rejects_malformed_events(self, tmp_path):
        p = tmp_path / "ev.jsonl"
        with pytest.raises(ValueError, match="stream"):
            write_event_log(p, [{"t_us": 3}])
        with pytest.raises(ValueError, match="t_us"):
            write_event_log(p, [{"stream": "x", "t_us": 3.5}])
        write_jsonl(p, [{"stream": "x"}])  # valid checksum, missing field
        with pytest.raises(CorruptFileError, match="t_us"):
            read_event_log(p)

    def _record(self, sid="s000", split="train"):
        return {
            "sample_id": sid,
            "files": {"bev": f"{sid}/bev.bevr", "labels": f"{sid}/labels.png"},
            "offsets_us": {"vehicle_rgb": -3100, "lidar_a": 41000},
            "ego_pose": [12.0, -7.5, 1.25],
            "ego_pixel": [601.4, 588.2],
            "match_confidence": 0.93,
            "grid": {"extent_m": 42.0, "size_px": 600},
            "config_hash": "feedc0de12345678",
            "split": split,
        }

    def test_manifest_round_trip_and_field_checks(self, tmp_path):
        p = tmp_path / "manifest.jsonl"
        rows = [self._record("s000"), self._record("s001", split=None)]
        write_manifest(p, rows)
        assert read_manifest(p) == rows

        with pytest.raises(ValueError, match="missing"):
            write_manifest(p, [{"sample_id": "x"}])
        with pytest.raises(ValueError, match="duplicate"):
            write_manifest(p, [self._record("same"), self._record("same")])

        write_jsonl(p, [self._record("a"), self._record("a")])
        with pytest.raises(CorruptFileError, match="duplicate"):
            read_manifest(p)

    def test_manifest_corruption_detected(self, tmp_path):
        p = tmp_path / "manifest.jsonl"
        write_manifest(p, [self._record()])
        assert_every_byte_flip_detected(p, lambda q: read_manifest(q) or True)

    def test_validate_pass_flags_real_problems(self, tmp_path):
        root = tmp_path / "data"
        (root / "s000").mkdir(parents=True)
        (root / "s000" / "bev.bevr").write_bytes(b"placeholder")
        (root / "s000" / "labels.png").write_bytes(b"placeholder")

        good = self._record("s000")
        assert validate_manifest([good], root) == []
        assert validate_manifest([good], root, expected_config_hash="feedc0de12345678") == []

        missing = self._record("s001")
        wrong_hash = dict(self._record("s000"), config_hash="other")
        late = dict(self._record("s000"), offsets_us={"lidar_a": 100_001})
        problems = validate_manifest(
            [missing, wrong_hash, late],
            root,
            expected_config_hash="feedc0de12345678",
            max_offset_us=100_000,
        )
        assert len(problems) == 4  # two missing files, one hash, one offset
        assert sum("missing file" in p for p in problems) == 2
        assert sum("config hash" in p for p in problems) == 1
        assert sum("over budget" in p for p in problems) == 1


# --------------------------------------------------------------------- png


class TestSemanticsPng:
    def test_round_trip_preserves_all_codes(self, tmp_path):
        rng = np.random.default_rng(9)
        labels = rng.choice(
            np.array([0, 1, 2, 3, 4, 254, 255], dtype=np.uint8), size=(33, 21)
        )
        p = tmp_path / "mask.png"
        save_semantics_png(p, labels)
        assert np.array_equal(load_semantics_png(p), labels)

    def test_void_code_renders_magenta(self, tmp_path):
        labels = np.array([[255, 0], [3, 254]], dtype=np.uint8)
        p = tmp_path / "mask.png"
        save_semantics_png(p, labels)
        pal = Image.open(p).getpalette()
        assert tuple(pal[255 * 3 : 255 * 3 + 3]) == VOID_COLOR
        assert tuple(pal[0:3]) == SEMANTIC_PALETTE[0]
        assert tuple(pal[3 * 3 : 3 * 3 + 3]) == SEMANTIC_PALETTE[3]

    def test_rejects_non_palette_png_and_bad_arrays(self, tmp_path):
        rgb = tmp_path / "rgb.png"
        Image.new("RGB", (4, 4), (10, 20, 30)).save(rgb)
        with pytest.raises(CorruptFileError, match="palette"):
            load_semantics_png(rgb)
        with pytest.raises(ValueError, match="uint8"):
            save_semantics_png(tmp_path / "x.png", np.zeros((4, 4), dtype=np.int32))

    def test_every_single_byte_corruption_detected(self, tmp_path):
        rng = np.random.default_rng(4)
        labels = rng.choice(
            np.array([0, 1, 2, 3, 4, 254, 255], dtype=np.uint8), size=(16, 16)
        )
        p = tmp_path / "c.png"
        save_semantics_png(p, labels)
        assert_every_byte_flip_detected(p, load_semantics_png)


# ------------------------------------------------------------------- splits


def assert_no_cross_split_leakage(assignment):
    """Brute-force pairwise path-distance check over all retained samples."""
    chain = np.asarray(assignment.chainage_m)
    labels = assignment.labels
    names = sorted({lab for lab in labels if lab is not None})
    for i, a in enumerate(names):
        ca = chain[[k for k, lab in enumerate(labels) if lab == a]]
        for b in names[i + 1 :]:
            cb = chain[[k for k, lab in enumerate(labels) if lab == b]]
            if ca.size and cb.size:
                gap = np.abs(ca[:, None] - cb[None, :]).min()
                assert gap >= assignment.guard_gap_m - 1e-9


def assert_segments_are_contiguous(assignment):
    spans = assignment.segments
    assert spans[0][0] == 0
    assert spans[-1][1] == len(assignment.labels)
    for (a0, a1, name_a), (b0, b1, name_b) in zip(spans, spans[1:]):
        assert a1 == b0
        assert name_a != name_b
    for start, stop, name in spans:
        for lab in assignment.labels[start:stop]:
            assert lab in (name, None)


def line_poses(n):
    return np.stack([np.arange(n, dtype=float), np.zeros(n)], axis=1)


class TestSplitByTrajectory:
    def test_everything_train_when_one_fraction(self):
        out = split_by_trajectory(line_poses(50), {"train": 1.0, "val": 0.0, "test": 0.0})
        assert out.labels == ("train",) * 50
        assert out.segments == ((0, 50, "train"),)
        assert out.dropped == 0

    def test_thousand_sample_drive_hand_derived(self):
        out = split_by_trajectory(
            line_poses(1000),
            {"train": 0.8, "val": 0.1, "test": 0.1},
            min_segment_m=100.0,
            guard_gap_m=50.0,
        )
        # nine 111 m segments; greedy gives train the first seven, then
        # val, then test, and the 50 m bands around chainage 777 and 888
        # drop 49 samples each
        assert out.segments == ((0, 777, "train"), (777, 888, "val"), (888, 1000, "test"))
        assert out.dropped == 98
        assert out.counts() == {"train": 753, "val": 62, "test": 87}
        assert out.labels[752] == "train"
        assert out.labels[753] is None
        assert out.labels[801] is None
        assert out.labels[802] == "val"
        assert_no_cross_split_leakage(out)
        assert_segments_are_contiguous(out)
        assert len(out.segments) >= 3

    def test_boundary_gap_is_exactly_the_guard(self):
        out = split_by_trajectory(
            line_poses(1000), {"train": 0.8, "val": 0.1, "test": 0.1}
        )
        chain = np.asarray(out.chainage_m)
        train = chain[[i for i, s in enumerate(out.labels) if s == "train"]]
        val = chain[[i for i, s in enumerate(out.labels) if s == "val"]]
        assert np.abs(train[:, None] - val[None, :]).min() == 50.0

    def test_random_walk_brute_force(self):
        rng = np.random.default_rng(21)
        steps = rng.uniform(0.5, 3.0, 399)
        headings = np.cumsum(rng.normal(0.0, 0.3, 399))
        xy = np.zeros((400, 2))
        xy[1:] = np.cumsum(
            np.stack([steps * np.cos(headings), steps * np.sin(headings)], axis=1), axis=0
        )
        out = split_by_trajectory(xy, min_segment_m=80.0, guard_gap_m=50.0)
        assert_no_cross_split_leakage(out)
        assert_segments_are_contiguous(out)
        got = out.counts()
        total = sum(got.values())
        assert got["train"] / total > 0.5

    def test_path_distance_not_geographic_distance(self):
        # out and back along one street: the same spot can serve two
        # splits when the visits are far apart along the path
        x = np.concatenate([np.arange(101.0), np.arange(99.0, -1.0, -1.0)])
        poses = np.stack([x, np.zeros_like(x)], axis=1)
        out = split_by_trajectory(
            poses, {"a": 0.5, "b": 0.5}, min_segment_m=100.0, guard_gap_m=10.0
        )
        assert out.labels[90] == "a"
        assert out.labels[110] == "b"
        assert np.allclose(poses[90], poses[110])
        assert_no_cross_split_leakage(out)

    def test_stationary_drive_is_one_segment(self):
        poses = np.tile([3.0, 4.0], (20, 1))
        out = split_by_trajectory(poses, {"a": 0.5, "b": 0.5})
        assert out.labels == ("a",) * 20
        assert out.chainage_m == (0.0,) * 20

    def test_heading_column_is_ignored(self):
        n = 200
        with_yaw = np.column_stack([np.arange(n), np.zeros(n), np.linspace(0, 9, n)])
        a = split_by_trajectory(with_yaw, min_segment_m=50.0)
        b = split_by_trajectory(line_poses(n), min_segment_m=50.0)
        assert a == b

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        xy = np.cumsum(rng.normal(size=(300, 2)), axis=0)
        assert split_by_trajectory(xy) == split_by_trajectory(xy)

    def test_validation_errors(self):
        good = line_poses(10)
        with pytest.raises(ValueError, match="sum to 1"):
            split_by_trajectory(good, {"a": 0.5, "b": 0.2})
        with pytest.raises(ValueError, match="non-negative"):
            split_by_trajectory(good, {"a": 1.5, "b": -0.5})
        with pytest.raises(ValueError, match="positive"):
            split_by_trajectory(good, {"a": 0.0, "b": 0.0, "c": 1.0}, min_segment_m=-1.0)
        with pytest.raises(ValueError, match="sum to 1"):
            split_by_trajectory(good, {"a": 0.0, "b": 0.0})
        with pytest.raises(ValueError, match="poses"):
            split_by_trajectory(np.zeros((0, 2)))
        with pytest.raises(ValueError, match="poses"):
            split_by_trajectory(np.zeros((5, 4)))
        with pytest.raises(ValueError, match="finite"):
            split_by_trajectory([[0.0, 0.0], [np.inf, 0.0]])
        with pytest.raises(ValueError, match="cannot fill"):
            split_by_trajectory([[0.0, 0.0], [1000.0, 0.0]], min_segment_m=100.0)
        with pytest.raises(ValueError, match="guard"):
            split_by_trajectory(good, guard_gap_m=-2.0)
