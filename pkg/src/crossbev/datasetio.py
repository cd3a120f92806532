"""On-disk formats and dataset splitting.

Two small binary containers cover the heavy data, both little-endian
with CRC32 guards so that any single corrupted byte is caught:

* raster container: magic ``BEVR``, version, channel count, height,
  width, a dtype tag (u8, u16 or f32), a length-prefixed channel name
  table, a header CRC, then each channel's row-major payload followed
  by its own CRC;
* point records: magic ``PCRD``, version, record count, header CRC,
  then packed 25-byte records (x, y, z, intensity as f32; t_us as u64;
  class as u8 with 255 meaning unlabeled) and a payload CRC.

Manifests and event logs are line-delimited JSON records, each line
prefixed with the CRC32 of its canonical serialisation.  Semantic
masks export to palette PNGs with the void code mapped to magenta.

Readers refuse inconsistent files with a :class:`BadMagicError`,
:class:`TruncatedFileError` or :class:`ChecksumError`, all of which
carry the byte offset where the problem was found.

Dataset splits are assigned along the drive: contiguous path-distance
segments go to whichever split is furthest below its target share, and
samples near a boundary between two different splits are dropped so
that no two retained samples from different splits sit closer than the
guard gap along the trajectory.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ClassId

_BEVR_MAGIC = b"BEVR"
_PCRD_MAGIC = b"PCRD"
_VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<f4")}
_TAG_FOR = {np.dtype(np.uint8): 0, np.dtype(np.uint16): 1, np.dtype(np.float32): 2}

_POINT_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4"), ("t_us", "<u8"), ("cls", "u1")]
)

MANIFEST_FIELDS = (
    "sample_id",
    "files",
    "offsets_us",
    "ego_pose",
    "ego_pixel",
    "match_confidence",
    "grid",
    "config_hash",
    "split",
)

DEFAULT_SPLIT_FRACTIONS = {"train": 0.7, "val": 0.15, "test": 0.15}

VOID_COLOR = (255, 0, 255)

SEMANTIC_PALETTE = {
    int(ClassId.ROAD): (92, 94, 98),
    int(ClassId.SIDEWALK): (168, 162, 148),
    int(ClassId.BUILDING): (146, 104, 82),
    int(ClassId.VEHICLE): (62, 88, 156),
    int(ClassId.VRU): (198, 64, 58),
    int(ClassId.TREE): (58, 128, 64),
    int(ClassId.IGNORE): VOID_COLOR,
}


class CorruptFileError(ValueError):
    """A reader found the file inconsistent; ``offset`` says where."""

    def __init__(self, message: str, offset: int):
        self.offset = int(offset)
        super().__init__(f"{message} (at byte {self.offset})")


class BadMagicError(CorruptFileError):
    """Wrong magic bytes or an unsupported format version."""


class TruncatedFileError(CorruptFileError):
    """The file ends before its self-described extent."""


class ChecksumError(CorruptFileError):
    """A stored CRC32 disagrees with the data it covers."""


def _crc(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


# ---------------------------------------------------------------- raster io


def write_bevr(path, channels: dict) -> int:
    """Write named 2-D channels (all one dtype and shape). Returns bytes written."""
    items = list(channels.items())
    if not items:
        raise ValueError("at least one channel is required")
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise ValueError("channel names must be unique")
    arrays = []
    for name, arr in items:
        a = np.asarray(arr)
        if not name or len(name.encode("utf-8")) > 0xFFFF:
            raise ValueError(f"bad channel name {name!r}")
        if a.ndim != 2 or a.size == 0:
            raise ValueError(f"channel {name!r} must be 2-D and non-empty, got shape {a.shape}")
        arrays.append(a)
    shape = arrays[0].shape
    kind = np.dtype(arrays[0].dtype)
    if kind not in _TAG_FOR:
        raise ValueError(f"unsupported dtype {kind}; use uint8, uint16 or float32")
    for name, a in zip(names, arrays):
        if a.shape != shape or np.dtype(a.dtype) != kind:
            raise ValueError(f"channel {name!r} disagrees on shape or dtype")

    tag = _TAG_FOR[kind]
    head = bytearray()
    head += _BEVR_MAGIC
    head += struct.pack("<HHIIB", _VERSION, len(items), shape[0], shape[1], tag)
    for name in names:
        nb = name.encode("utf-8")
        head += struct.pack("<H", len(nb)) + nb
    out = bytearray(head)
    out += struct.pack("<I", _crc(bytes(head)))
    for a in arrays:
        payload = np.ascontiguousarray(a).astype(_DTYPE_TAGS[tag], copy=False).tobytes()
        out += payload
        out += struct.pack("<I", _crc(payload))
    data = bytes(out)
    Path(path).write_bytes(data)
    return len(data)


def read_bevr(path) -> dict:
    """Read a raster container back into {name: array}, verifying CRCs."""
    buf = Path(path).read_bytes()
    if len(buf) < 17:
        raise TruncatedFileError("file ends inside the fixed header", len(buf))
    if buf[:4] != _BEVR_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}", 0)
    version, n_ch, h, w, tag = struct.unpack_from("<HHIIB", buf, 4)
    if version != _VERSION:
        raise BadMagicError(f"unsupported version {version}", 4)
    pos = 17
    names = []
    for _ in range(n_ch):
        if pos + 2 > len(buf):
            raise TruncatedFileError("file ends inside the name table", pos)
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + ln > len(buf):
            raise TruncatedFileError("file ends inside a channel name", pos)
        names.append(buf[pos : pos + ln].decode("utf-8", errors="replace"))
        pos += ln
    if pos + 4 > len(buf):
        raise TruncatedFileError("file ends before the header checksum", pos)
    (stored,) = struct.unpack_from("<I", buf, pos)
    if _crc(buf[:pos]) != stored:
        raise ChecksumError("header checksum mismatch", pos)
    pos += 4
    if tag not in _DTYPE_TAGS:
        raise CorruptFileError(f"unknown dtype tag {tag}", 16)
    dt = _DTYPE_TAGS[tag]
    ch_bytes = int(h) * int(w) * dt.itemsize
    expected = pos + n_ch * (ch_bytes + 4)
    if len(buf) < expected:
        raise TruncatedFileError(f"file is {len(buf)} bytes, geometry implies {expected}", len(buf))
    if len(buf) > expected:
        raise CorruptFileError(f"{len(buf) - expected} trailing bytes after payload", expected)
    out = {}
    for name in names:
        payload = buf[pos : pos + ch_bytes]
        (stored,) = struct.unpack_from("<I", buf, pos + ch_bytes)
        if _crc(payload) != stored:
            raise ChecksumError(f"channel {name!r} checksum mismatch", pos + ch_bytes)
        out[name] = np.frombuffer(payload, dtype=dt).reshape(h, w).copy()
        pos += ch_bytes + 4
    return out


# ----------------------------------------------------------------- point io


@dataclass(frozen=True)
class PointCloudFile:
    """Decoded point records; arrays are read-only."""

    xyz: np.ndarray
    intensity: np.ndarray
    t_us: np.ndarray
    classes: np.ndarray

    def __post_init__(self) -> None:
        for name in ("xyz", "intensity", "t_us", "classes"):
            getattr(self, name).flags.writeable = False

    def __len__(self) -> int:
        return int(self.xyz.shape[0])


def write_points(path, xyz, intensity, t_us, classes=None) -> int:
    """Write packed point records. ``classes`` defaults to 255 (unlabeled)."""
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise ValueError(f"xyz must be (N, 3), got {xyz.shape}")
    n = xyz.shape[0]
    intensity = np.asarray(intensity, dtype=np.float64)
    t_us = np.asarray(t_us)
    if intensity.shape != (n,) or t_us.shape != (n,):
        raise ValueError("intensity and t_us must be (N,)")
    if t_us.dtype.kind not in "iu":
        raise ValueError(f"t_us must be integer microseconds, got {t_us.dtype}")
    if t_us.dtype.kind == "i" and n and t_us.min() < 0:
        raise ValueError("t_us must be non-negative")
    if not (np.isfinite(xyz).all() and np.isfinite(intensity).all()):
        raise ValueError("coordinates and intensity must be finite")
    if classes is None:
        cls = np.full(n, 255, dtype=np.uint8)
    else:
        cls = np.asarray(classes)
        if cls.shape != (n,):
            raise ValueError("classes must be (N,)")
        if n and (cls.min() < 0 or cls.max() > 255):
            raise ValueError("classes must fit in uint8")
        cls = cls.astype(np.uint8)

    rec = np.empty(n, dtype=_POINT_DTYPE)
    rec["x"] = xyz[:, 0]
    rec["y"] = xyz[:, 1]
    rec["z"] = xyz[:, 2]
    rec["intensity"] = intensity
    rec["t_us"] = t_us.astype(np.uint64)
    rec["cls"] = cls
    payload = rec.tobytes()

    head = _PCRD_MAGIC + struct.pack("<HQ", _VERSION, n)
    out = head + struct.pack("<I", _crc(head)) + payload + struct.pack("<I", _crc(payload))
    Path(path).write_bytes(out)
    return len(out)


def read_points(path) -> PointCloudFile:
    buf = Path(path).read_bytes()
    if len(buf) < 18:
        raise TruncatedFileError("file ends inside the fixed header", len(buf))
    if buf[:4] != _PCRD_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}", 0)
    version, n = struct.unpack_from("<HQ", buf, 4)
    (stored,) = struct.unpack_from("<I", buf, 14)
    if _crc(buf[:14]) != stored:
        raise ChecksumError("header checksum mismatch", 14)
    if version != _VERSION:
        raise BadMagicError(f"unsupported version {version}", 4)
    expected = 18 + n * _POINT_DTYPE.itemsize + 4
    if len(buf) < expected:
        raise TruncatedFileError(f"file is {len(buf)} bytes, record count implies {expected}", len(buf))
    if len(buf) > expected:
        raise CorruptFileError(f"{len(buf) - expected} trailing bytes after payload", expected)
    payload = buf[18 : expected - 4]
    (stored,) = struct.unpack_from("<I", buf, expected - 4)
    if _crc(payload) != stored:
        raise ChecksumError("payload checksum mismatch", expected - 4)
    rec = np.frombuffer(payload, dtype=_POINT_DTYPE)
    return PointCloudFile(
        xyz=np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float32),
        intensity=rec["intensity"].astype(np.float32),
        t_us=rec["t_us"].astype(np.uint64),
        classes=rec["cls"].astype(np.uint8),
    )


# ----------------------------------------------------------------- jsonl io


def _canonical_json(record) -> bytes:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def write_jsonl(path, records) -> int:
    """One record per line, each prefixed with the CRC32 of its JSON."""
    out = bytearray()
    for rec in records:
        data = _canonical_json(rec)
        out += f"{_crc(data):08x} ".encode() + data + b"\n"
    Path(path).write_bytes(bytes(out))
    return len(out)


def read_jsonl(path) -> list:
    buf = Path(path).read_bytes()
    records = []
    offset = 0
    for line in buf.split(b"\n"):
        if line == b"" and offset >= len(buf):
            break
        if len(line) < 10 or line[8:9] != b" ":
            raise CorruptFileError("malformed line prefix", offset)
        try:
            stored = int(line[:8], 16)
        except ValueError:
            raise ChecksumError("unreadable line checksum", offset) from None
        data = line[9:]
        if _crc(data) != stored:
            raise ChecksumError("line checksum mismatch", offset)
        try:
            records.append(json.loads(data.decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise CorruptFileError("checksummed line is not valid JSON", offset) from None
        offset += len(line) + 1
    return records


# ------------------------------------------------- event logs and manifests


def write_event_log(path, events) -> int:
    """Sensor events as checksummed JSON lines, in the given order."""
    rows = list(events)
    for i, ev in enumerate(rows):
        if not isinstance(ev, dict) or not isinstance(ev.get("stream"), str):
            raise ValueError(f"event {i} must be a dict with a 'stream' name")
        if not isinstance(ev.get("t_us"), int):
            raise ValueError(f"event {i} must carry an integer 't_us'")
    return write_jsonl(path, rows)


def read_event_log(path) -> list:
    events = read_jsonl(path)
    for i, ev in enumerate(events):
        if not isinstance(ev.get("stream"), str) or not isinstance(ev.get("t_us"), int):
            raise CorruptFileError(f"event {i} lacks stream/t_us fields", 0)
    return events


def write_manifest(path, records) -> int:
    """Sample manifest as checksummed JSON lines; ids must be unique."""
    rows = list(records)
    seen = set()
    for i, rec in enumerate(rows):
        missing = [k for k in MANIFEST_FIELDS if k not in rec]
        if missing:
            raise ValueError(f"manifest record {i} is missing {missing}")
        sid = rec["sample_id"]
        if not isinstance(sid, str) or not sid:
            raise ValueError(f"manifest record {i} has a bad sample_id")
        if sid in seen:
            raise ValueError(f"duplicate sample_id {sid!r}")
        seen.add(sid)
        if not isinstance(rec["files"], dict):
            raise ValueError(f"manifest record {i}: files must map modality to path")
    return write_jsonl(path, rows)


def read_manifest(path) -> list:
    records = read_jsonl(path)
    seen = set()
    for i, rec in enumerate(records):
        missing = [k for k in MANIFEST_FIELDS if k not in rec]
        if missing:
            raise CorruptFileError(f"manifest record {i} is missing {missing}", 0)
        if rec["sample_id"] in seen:
            raise CorruptFileError(f"duplicate sample_id {rec['sample_id']!r}", 0)
        seen.add(rec["sample_id"])
    return records


def validate_manifest(records, root, expected_config_hash=None, max_offset_us=None) -> list:
    """Cross-check manifest records against the filesystem.

    Returns a list of human-readable problems, empty when everything
    holds: every referenced file must exist under ``root``, config
    hashes must match ``expected_config_hash`` when given, and stream
    offsets must stay within ``max_offset_us`` when given.
    """
    root = Path(root)
    problems = []
    for rec in records:
        sid = rec.get("sample_id", "<missing id>")
        for modality, rel in rec.get("files", {}).items():
            if not (root / rel).is_file():
                problems.append(f"{sid}: missing file for {modality}: {rel}")
        if expected_config_hash is not None and rec.get("config_hash") != expected_config_hash:
            problems.append(f"{sid}: config hash {rec.get('config_hash')!r} does not match run")
        if max_offset_us is not None:
            for stream, off in rec.get("offsets_us", {}).items():
                if abs(int(off)) > max_offset_us:
                    problems.append(f"{sid}: offset for {stream} is {off} us, over budget")
    return problems


# ------------------------------------------------------------------ png io


def _full_palette() -> list:
    pal = [0, 0, 0] * 256
    for code, rgb in SEMANTIC_PALETTE.items():
        pal[code * 3 : code * 3 + 3] = rgb
    return pal


def encode_semantics_png(labels) -> bytes:
    """Palette PNG bytes; the void code renders magenta."""
    a = np.asarray(labels)
    if a.ndim != 2 or a.dtype != np.uint8:
        raise ValueError(f"labels must be 2-D uint8, got {a.shape} {a.dtype}")
    img = Image.fromarray(a)
    img.putpalette(_full_palette())
    sink = io.BytesIO()
    img.save(sink, format="PNG")
    return sink.getvalue()


def save_semantics_png(path, labels) -> None:
    Path(path).write_bytes(encode_semantics_png(labels))


_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _verify_png_chunks(buf: bytes) -> None:
    # The stdlib decoder is not strict about every stored CRC, so walk
    # the chunk layout ourselves and fail with a byte offset.
    if buf[:8] != _PNG_SIG:
        raise BadMagicError("bad PNG signature", 0)
    pos = 8
    while True:
        if pos + 8 > len(buf):
            raise TruncatedFileError("file ends inside a chunk header", pos)
        (length,) = struct.unpack_from(">I", buf, pos)
        ctype = buf[pos + 4 : pos + 8]
        end = pos + 8 + length
        if end + 4 > len(buf):
            raise TruncatedFileError(f"file ends inside chunk {ctype!r}", pos)
        (stored,) = struct.unpack_from(">I", buf, end)
        if _crc(ctype + buf[pos + 8 : end]) != stored:
            raise ChecksumError(f"chunk {ctype!r} checksum mismatch", end)
        pos = end + 4
        if ctype == b"IEND":
            break
    if pos != len(buf):
        raise CorruptFileError(f"{len(buf) - pos} trailing bytes after IEND", pos)


def decode_semantics_png(buf: bytes) -> np.ndarray:
    _verify_png_chunks(buf)
    try:
        img = Image.open(io.BytesIO(buf))
        img.load()
    except Exception as exc:
        raise CorruptFileError(f"undecodable PNG: {exc}", 0) from None
    if img.mode != "P":
        raise CorruptFileError(f"expected a palette PNG, got mode {img.mode}", 0)
    return np.asarray(img, dtype=np.uint8).copy()


def load_semantics_png(path) -> np.ndarray:
    return decode_semantics_png(Path(path).read_bytes())


# ------------------------------------------------------------------- split


@dataclass(frozen=True)
class SplitAssignment:
    """Per-sample split tags plus the segment layout that produced them.

    ``labels`` holds one split name per sample, or None where the
    sample fell inside a guard band and was dropped from all splits.
    ``segments`` are merged (start_index, stop_index, split) intervals
    covering the sample order; ``chainage_m`` is the cumulative path
    distance of each sample along the drive.
    """

    labels: tuple
    segments: tuple
    chainage_m: tuple
    guard_gap_m: float

    def counts(self) -> dict:
        out: dict = {}
        for lab in self.labels:
            if lab is not None:
                out[lab] = out.get(lab, 0) + 1
        return out

    @property
    def dropped(self) -> int:
        return sum(1 for lab in self.labels if lab is None)


def split_by_trajectory(
    poses,
    fractions: dict | None = None,
    min_segment_m: float = 100.0,
    guard_gap_m: float = 50.0,
) -> SplitAssignment:
    """Partition ordered samples into splits along the drive.

    ``poses`` is an (N, 2) or (N, 3) array of ego positions in sample
    order (a trailing heading column is ignored); path distance is the
    cumulative length of the polyline through them.  The drive is cut
    into equal path-distance segments no shorter than
    ``min_segment_m``; walking the segments in order, each goes to the
    split currently furthest below its target share of samples (ties
    favour the order of ``fractions``).  Samples within half a guard
    gap of a boundary between two different splits are dropped, which
    guarantees any two retained samples from different splits are at
    least ``guard_gap_m`` apart along the path.
    """
    p = np.asarray(poses, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0 or p.shape[1] not in (2, 3):
        raise ValueError(f"poses must be (N, 2) or (N, 3), got {p.shape}")
    if not np.isfinite(p).all():
        raise ValueError("poses must be finite")
    fractions = dict(DEFAULT_SPLIT_FRACTIONS if fractions is None else fractions)
    if not fractions:
        raise ValueError("fractions must not be empty")
    for k, f in fractions.items():
        if not f >= 0:
            raise ValueError(f"fraction for {k!r} must be non-negative")
    if abs(sum(fractions.values()) - 1.0) > 1e-6:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions.values())}")
    if not min_segment_m > 0:
        raise ValueError("min_segment_m must be positive")
    if guard_gap_m < 0:
        raise ValueError("guard_gap_m must be non-negative")

    n = p.shape[0]
    steps = np.hypot(np.diff(p[:, 0]), np.diff(p[:, 1]))
    chain = np.concatenate([[0.0], np.cumsum(steps)])
    span = float(chain[-1])

    n_seg = max(1, int(span // min_segment_m))
    if n < n_seg:
        raise ValueError(f"{n} samples cannot fill {n_seg} segments")
    if span > 0:
        seg_of = np.minimum((chain * n_seg / span).astype(np.int64), n_seg - 1)
    else:
        seg_of = np.zeros(n, dtype=np.int64)
    weight = np.bincount(seg_of, minlength=n_seg).astype(np.float64)

    candidates = [k for k, f in fractions.items() if f > 0]
    assigned = {k: 0.0 for k in candidates}
    seg_label = []
    for s in range(n_seg):
        pick = max(candidates, key=lambda k: fractions[k] * n - assigned[k])
        seg_label.append(pick)
        assigned[pick] += float(weight[s])

    boundaries = [
        span * s / n_seg for s in range(1, n_seg) if seg_label[s] != seg_label[s - 1]
    ]

    labels: list = [seg_label[i] for i in seg_of]
    half = guard_gap_m / 2.0
    if boundaries and half > 0:
        b = np.asarray(boundaries)
        near = (np.abs(chain[:, None] - b[None, :]) < half).any(axis=1)
        for i in np.nonzero(near)[0]:
            labels[i] = None

    # merged (start_index, stop_index, split) intervals over the sample order
    spans = []
    start = 0
    for i in range(1, n + 1):
        if i == n or seg_label[seg_of[i]] != seg_label[seg_of[start]]:
            spans.append((start, i, seg_label[seg_of[start]]))
            start = i
    return SplitAssignment(
        labels=tuple(labels),
        segments=tuple(spans),
        chainage_m=tuple(float(c) for c in chain),
        guard_gap_m=float(guard_gap_m),
    )
