"""Stage orchestration for the synthetic supervision pipeline.

Each stage reads its upstream manifest, writes a fresh output
directory, and never mutates earlier results.  Output directories are
content-addressed: ``<out_dir>/<stage>-<hash>`` where the hash digests
the resolved configuration (minus the output root), so rerunning an
unchanged configuration is a no-op and sweeps over parameters never
collide.  Directories appear atomically via a temp-dir rename, with a
``stage.json`` summary written last as the completion marker.

The stage chain is linear:

    synth -> align -> rasterize -> fuse -> split -> eval -> report

``synth`` simulates a drive and emits frames, point files and an event
log; ``align`` matches streams per anchor, localizes the ego marker in
the matched aerial frame and crops supervision rasters; ``rasterize``
turns matched sweeps into BEV feature channels; ``fuse`` builds
tri-state pseudo-labels; ``split`` assigns trajectory-segment splits;
``eval`` scores fused labels against the cropped reference and
``report`` renders the tables.

Set ``GOLDBEV_THREADS`` to allow per-sample thread parallelism inside
a stage; results are collected in input order either way, so output
bytes do not depend on the thread count.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import datasetio as dio
from .bevraster import rasterize_lidar, visibility_cone_mask
from .core import BevGridSpec, ClassId, Pose2D
from .crossview import (
    AlignedSample,
    ProjectionOutOfFrameError,
    make_bev_crop,
    match_temporal,
    project_gnss_to_pixel,
    refine_by_template,
)
from .evalmetrics import confusion, iou_report, psnr, restrict_vehicles_to_visible, ssim
from .labelfuse import FusionThresholds, fuse_pseudo_labels
from .synthworld import (
    STREAMS,
    AerialFrame,
    CameraPose,
    LidarSpec,
    generate_world,
    heading_in_image,
    render_aerial,
    render_marker_template,
    simulate_drive,
    simulate_lidar,
    world_of_pixel,
)

STAGES = ("synth", "align", "rasterize", "fuse", "split", "eval", "report")

_UPSTREAM = {
    "synth": None,
    "align": "synth",
    "rasterize": "align",
    "fuse": "rasterize",
    "split": "fuse",
    "eval": "split",
    "report": "eval",
}

DEFAULT_CONFIG = {
    "seed": 7,
    "out_dir": "out",
    "grid": {"extent_m": 42.0, "size_px": 210},
    "synth": {
        "world_extent_m": 240.0,
        "world_counts": {
            "road": 2,
            "building": 10,
            "tree": 12,
            "vehicle": 8,
            "vru": 36,
        },
        "duration_s": 20.0,
        "speed_mps": 8.0,
        "rates_hz": {
            "aerial_rgb": 6.25,
            "vehicle_rgb": 10.0,
            "lidar_a": 10.0,
            "lidar_b": 10.0,
            "gnss_imu": 20.0,
        },
        "clock_jitter_us": 2000,
        "gnss_noise_m": 1.5,
        "heading_noise_rad": 0.01,
        "aerial_size_px": 600,
        "lidar": {
            "channels": 16,
            "elev_min_deg": -14.0,
            "elev_max_deg": 6.0,
            "azimuth_step_deg": 1.0,
            "max_range_m": 45.0,
            "sensor_height_m": 1.8,
        },
    },
    "alignment": {
        "max_offset_us": 100_000,
        "min_confidence": 0.65,
        "window_px": 75,
        "max_samples": 200,
        # constant per-stream clock corrections, microseconds; applied at
        # ingest, as if the log had been re-stamped onto the common timebase
        "stream_offsets_us": {},
    },
    "raster": {"height_range": [-2.0, 4.0], "density_cap": 64},
    "fusion": {"tau_ped_hi": 0.9, "tau_ped_lo": 0.3, "tau_c": 0.8},
    # corruption applied to the stand-in teacher heads so downstream
    # metrics exercise the reject paths instead of scoring a tautology
    "teachers": {"label_flip": 0.08, "conf_dropout": 0.05},
    "cone": {"hfov_deg": 90.0, "max_range_m": None},
    "visibility": {"min_returns": 3},
    "split": {
        "fractions": {"train": 0.7, "val": 0.15, "test": 0.15},
        "min_segment_m": 30.0,
        "guard_gap_m": 25.0,
    },
}

# nested dicts replaced wholesale instead of key-merged
_LEAF_DICTS = {
    "synth.rates_hz",
    "synth.world_counts",
    "alignment.stream_offsets_us",
    "split.fractions",
}


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every offending field."""

    def __init__(self, problems: list):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


class PipelineError(RuntimeError):
    """A stage could not run (usually a missing upstream directory)."""


def _merge(defaults: dict, user: dict, prefix: str, problems: list) -> dict:
    out = {}
    for key, dv in defaults.items():
        path = f"{prefix}{key}"
        if key not in user:
            out[key] = dv
        elif isinstance(dv, dict) and path not in _LEAF_DICTS:
            if isinstance(user[key], dict):
                out[key] = _merge(dv, user[key], f"{path}.", problems)
            else:
                problems.append(f"{path}: expected an object")
                out[key] = dv
        else:
            out[key] = user[key]
    for key in user:
        if key not in defaults:
            problems.append(f"unknown field: {prefix}{key}")
    return out


def _validate(cfg: dict, problems: list) -> None:
    def check(cond, msg):
        if not cond:
            problems.append(msg)

    check(isinstance(cfg["seed"], int), "seed: must be an integer")
    check(isinstance(cfg["out_dir"], str) and cfg["out_dir"], "out_dir: must be a path")

    g = cfg["grid"]
    check(isinstance(g["size_px"], int) and g["size_px"] >= 8, "grid.size_px: integer >= 8")
    check(g["extent_m"] > 0, "grid.extent_m: must be positive")

    s = cfg["synth"]
    check(s["world_extent_m"] > 0, "synth.world_extent_m: must be positive")
    wc = s["world_counts"]
    if isinstance(wc, dict):
        for name, n in wc.items():
            check(isinstance(n, int) and n >= 0,
                  f"synth.world_counts.{name}: non-negative integer")
    else:
        problems.append("synth.world_counts: expected an object")
    check(s["duration_s"] > 0, "synth.duration_s: must be positive")
    check(s["speed_mps"] > 0, "synth.speed_mps: must be positive")
    check(isinstance(s["clock_jitter_us"], int) and s["clock_jitter_us"] >= 0,
          "synth.clock_jitter_us: non-negative integer")
    check(s["gnss_noise_m"] >= 0, "synth.gnss_noise_m: must be non-negative")
    check(s["heading_noise_rad"] >= 0, "synth.heading_noise_rad: must be non-negative")
    check(isinstance(s["aerial_size_px"], int) and s["aerial_size_px"] >= 64,
          "synth.aerial_size_px: integer >= 64")
    rates = s["rates_hz"]
    check(isinstance(rates, dict) and set(rates) == set(STREAMS),
          f"synth.rates_hz: must name exactly the streams {sorted(STREAMS)}")
    if isinstance(rates, dict):
        for name, hz in rates.items():
            check(isinstance(hz, (int, float)) and hz > 0, f"synth.rates_hz.{name}: must be positive")
    try:
        LidarSpec(**s["lidar"])
    except (TypeError, ValueError) as exc:
        problems.append(f"synth.lidar: {exc}")

    a = cfg["alignment"]
    check(isinstance(a["max_offset_us"], int) and 0 <= a["max_offset_us"] <= 100_000,
          "alignment.max_offset_us: integer in [0, 100000]")
    check(0.65 <= a["min_confidence"] <= 1, "alignment.min_confidence: in [0.65, 1]")
    check(isinstance(a["window_px"], int) and a["window_px"] >= 9,
          "alignment.window_px: integer >= 9")
    check(a["max_samples"] is None or (isinstance(a["max_samples"], int) and a["max_samples"] >= 1),
          "alignment.max_samples: null or integer >= 1")
    skew = a["stream_offsets_us"]
    if isinstance(skew, dict):
        for name, off in skew.items():
            check(name in STREAMS, f"alignment.stream_offsets_us.{name}: unknown stream")
            check(isinstance(off, int) and not isinstance(off, bool),
                  f"alignment.stream_offsets_us.{name}: integer microseconds")
    else:
        problems.append("alignment.stream_offsets_us: expected an object keyed by stream")

    r = cfg["raster"]
    hr = r["height_range"]
    check(isinstance(hr, (list, tuple)) and len(hr) == 2 and hr[0] < hr[1],
          "raster.height_range: [low, high] with low < high")
    check(isinstance(r["density_cap"], int) and r["density_cap"] >= 1,
          "raster.density_cap: integer >= 1")

    try:
        FusionThresholds(**cfg["fusion"])
    except (TypeError, ValueError) as exc:
        problems.append(f"fusion: {exc}")

    t = cfg["teachers"]
    check(isinstance(t["label_flip"], (int, float)) and 0 <= t["label_flip"] <= 1,
          "teachers.label_flip: in [0, 1]")
    check(isinstance(t["conf_dropout"], (int, float)) and 0 <= t["conf_dropout"] <= 1,
          "teachers.conf_dropout: in [0, 1]")

    c = cfg["cone"]
    check(isinstance(c["hfov_deg"], (int, float)) and 0 < c["hfov_deg"] <= 360,
          "cone.hfov_deg: in (0, 360]")
    check(c["max_range_m"] is None or c["max_range_m"] > 0,
          "cone.max_range_m: null or positive")

    check(isinstance(cfg["visibility"]["min_returns"], int) and cfg["visibility"]["min_returns"] >= 1,
          "visibility.min_returns: integer >= 1")

    sp = cfg["split"]
    fr = sp["fractions"]
    if isinstance(fr, dict) and fr:
        bad = [k for k, v in fr.items() if not (isinstance(v, (int, float)) and v >= 0)]
        for k in bad:
            problems.append(f"split.fractions.{k}: must be non-negative")
        if not bad:
            check(abs(sum(fr.values()) - 1.0) <= 1e-6, "split.fractions: must sum to 1")
    else:
        problems.append("split.fractions: must be a non-empty object")
    check(sp["min_segment_m"] > 0, "split.min_segment_m: must be positive")
    check(sp["guard_gap_m"] >= 0, "split.guard_gap_m: must be non-negative")


@dataclass(frozen=True)
class PipelineConfig:
    """Fully resolved, validated configuration for one pipeline run."""

    raw: dict

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def out_root(self) -> Path:
        return Path(self.raw["out_dir"])

    @property
    def grid(self) -> BevGridSpec:
        g = self.raw["grid"]
        return BevGridSpec(extent_m=float(g["extent_m"]), size_px=int(g["size_px"]))

    @property
    def gsd_m(self) -> float:
        return self.grid.cell_m

    @property
    def lidar_spec(self) -> LidarSpec:
        return LidarSpec(**self.raw["synth"]["lidar"])

    @property
    def thresholds(self) -> FusionThresholds:
        return FusionThresholds(**self.raw["fusion"])

    def cone_mask(self) -> np.ndarray:
        c = self.raw["cone"]
        rng = c["max_range_m"]
        mask = visibility_cone_mask(
            self.grid,
            hfov_deg=float(c["hfov_deg"]),
            max_range_m=None if rng is None else float(rng),
        )
        return np.asarray(mask.data)

    @property
    def config_hash(self) -> str:
        hashed = {k: v for k, v in self.raw.items() if k != "out_dir"}
        return hashlib.sha256(dio._canonical_json(hashed)).hexdigest()[:12]

    def stage_dir(self, stage: str) -> Path:
        return self.out_root / f"{stage}-{self.config_hash}"


def load_config(path=None, *, seed=None, out_dir=None) -> PipelineConfig:
    """Merge a JSON config file over the defaults and validate it.

    Every problem is collected before raising, so one failed run names
    all offending fields at once.
    """
    user: dict = {}
    if path is not None:
        user = json.loads(Path(path).read_text())
        if not isinstance(user, dict):
            raise ConfigError(["top level: must be a JSON object"])
    problems: list = []
    merged = _merge(DEFAULT_CONFIG, user, "", problems)
    if seed is not None:
        merged["seed"] = seed
    if out_dir is not None:
        merged["out_dir"] = str(out_dir)
    _validate(merged, problems)
    if problems:
        raise ConfigError(problems)
    # round-trip through JSON so the hash sees exactly what a file would say
    return PipelineConfig(raw=json.loads(dio._canonical_json(merged)))


def _thread_budget() -> int:
    try:
        return max(1, int(os.environ.get("GOLDBEV_THREADS", "1")))
    except ValueError:
        return 1


def _pmap(fn, items):
    """Order-preserving map, threaded when GOLDBEV_THREADS allows."""
    items = list(items)
    budget = _thread_budget()
    if budget <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(budget, len(items))) as pool:
        return list(pool.map(fn, items))


def _write_json(path: Path, payload: dict) -> None:
    path.write_bytes(dio._canonical_json(payload) + b"\n")


def _read_json(path: Path) -> dict:
    return json.loads(path.read_text())


@dataclass(frozen=True)
class StageResult:
    stage: str
    out_dir: Path
    fresh: bool
    info: dict


def run_stage(stage: str, config: PipelineConfig) -> StageResult:
    """Execute one stage; a completed identical run short-circuits."""
    if stage not in STAGES:
        raise PipelineError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    final = config.stage_dir(stage)
    marker = final / "stage.json"
    if marker.is_file():
        return StageResult(stage, final, fresh=False, info=_read_json(marker))

    upstream = _UPSTREAM[stage]
    if upstream is not None and not (config.stage_dir(upstream) / "stage.json").is_file():
        raise PipelineError(
            f"stage {stage!r} needs {upstream!r} first: "
            f"missing {config.stage_dir(upstream) / 'stage.json'}"
        )

    config.out_root.mkdir(parents=True, exist_ok=True)
    tmp = config.out_root / f".tmp-{stage}-{config.config_hash}-{uuid.uuid4().hex[:8]}"
    tmp.mkdir()
    try:
        info = _STAGE_FNS[stage](config, tmp)
        info = {"stage": stage, "config_hash": config.config_hash, **info}
        _write_json(tmp / "stage.json", info)
        try:
            os.replace(tmp, final)
        except OSError:
            if marker.is_file():  # concurrent run beat us to it
                shutil.rmtree(tmp)
                return StageResult(stage, final, fresh=False, info=_read_json(marker))
            raise
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return StageResult(stage, final, fresh=True, info=info)


def run_pipeline(config: PipelineConfig, upto: str = "report") -> list:
    """Run stages in order through ``upto``; returns their results."""
    if upto not in STAGES:
        raise PipelineError(f"unknown stage {upto!r}")
    results = []
    for name in STAGES[: STAGES.index(upto) + 1]:
        results.append(run_stage(name, config))
    return results


# -------------------------------------------------------------------- synth


def _stage_synth(cfg: PipelineConfig, out: Path) -> dict:
    s = cfg.raw["synth"]
    world = generate_world(
        cfg.seed, extent_m=float(s["world_extent_m"]), counts=dict(s["world_counts"])
    )
    log = simulate_drive(
        world,
        cfg.seed,
        duration_s=float(s["duration_s"]),
        rates=dict(s["rates_hz"]),
        clock_jitter_us=int(s["clock_jitter_us"]),
        gnss_noise_m=float(s["gnss_noise_m"]),
        gsd_m=cfg.gsd_m,
        aerial_size_px=int(s["aerial_size_px"]),
        speed_mps=float(s["speed_mps"]),
        heading_noise_rad=float(s["heading_noise_rad"]),
    )
    (out / "frames").mkdir()
    (out / "points").mkdir()
    stage_name = out_rel = f"synth-{cfg.config_hash}"
    spec = cfg.lidar_spec

    rows = []
    n_frames = n_sweeps = 0
    for si, stream in enumerate(STREAMS):
        for ev in log.events[stream]:
            row = {"stream": stream, "t_us": int(ev.t_us), "_si": si}
            if stream == "aerial_rgb":
                pose = log.trajectory.pose_at(ev.t_us / 1e6)
                frame = render_aerial(
                    world,
                    ev.payload.cam,
                    ev.payload.gsd_m,
                    ev.payload.size_px,
                    ego_pose=pose,
                    t_us=int(ev.t_us),
                )
                rgb_rel = f"{out_rel}/frames/aerial_{n_frames:04d}.bevr"
                lab_rel = f"{out_rel}/frames/aerial_{n_frames:04d}.png"
                img = frame.image
                dio.write_bevr(
                    out / "frames" / Path(rgb_rel).name,
                    {"r": img[:, :, 0], "g": img[:, :, 1], "b": img[:, :, 2]},
                )
                dio.save_semantics_png(out / "frames" / Path(lab_rel).name, frame.gt_semantics)
                cam = ev.payload.cam
                row.update(
                    cam=[cam.x, cam.y, cam.yaw_rad],
                    gsd_m=ev.payload.gsd_m,
                    size_px=ev.payload.size_px,
                    frame=rgb_rel,
                    labels=lab_rel,
                )
                n_frames += 1
            elif stream == "vehicle_rgb":
                p = ev.payload.pose
                row.update(pose=[p.x, p.y, p.heading_rad])
            elif stream in ("lidar_a", "lidar_b"):
                sweep = simulate_lidar(
                    world, ev.payload.pose, spec, t_us=int(ev.t_us), sensor_id=stream
                )
                rel = f"{out_rel}/points/{stream}_{n_sweeps:04d}.pcrd"
                pts = sweep.points
                dio.write_points(
                    out / "points" / Path(rel).name,
                    xyz=pts[:, :3],
                    intensity=pts[:, 3],
                    t_us=np.rint(pts[:, 4]).astype(np.int64),
                )
                p = ev.payload.pose
                row.update(pose=[p.x, p.y, p.heading_rad], points=rel, n_points=len(sweep))
                n_sweeps += 1
            else:  # gnss_imu
                row.update(x=ev.payload.x, y=ev.payload.y, heading_rad=ev.payload.heading_rad)
            rows.append(row)

    rows.sort(key=lambda r: (r["t_us"], r["_si"]))
    for row in rows:
        del row["_si"]
    dio.write_event_log(out / "events.jsonl", rows)
    return {
        "dir": stage_name,
        "events": {name: len(log.events[name]) for name in STREAMS},
        "frames": n_frames,
        "sweeps": n_sweeps,
        "world_primitives": len(world.primitives),
    }


# -------------------------------------------------------------------- align


class _FrameCache:
    """Keeps the last few decoded aerial frames; anchors arrive in time
    order so reuse is heavily local."""

    def __init__(self, root: Path, capacity: int = 4):
        self.root = root
        self.capacity = capacity
        self._held: dict = {}

    def get(self, row: dict) -> AerialFrame:
        key = row["frame"]
        if key not in self._held:
            if len(self._held) >= self.capacity:
                self._held.pop(next(iter(self._held)))
            ch = dio.read_bevr(self.root / row["frame"])
            image = np.stack([ch["r"], ch["g"], ch["b"]], axis=-1)
            labels = dio.load_semantics_png(self.root / row["labels"])
            self._held[key] = AerialFrame(
                image=image,
                gt_semantics=labels,
                t_us=int(row["t_us"]),
                cam=CameraPose(*row["cam"]),
                gsd_m=float(row["gsd_m"]),
            )
        return self._held[key]


def _stage_align(cfg: PipelineConfig, out: Path) -> dict:
    a = cfg.raw["alignment"]
    synth_dir = cfg.stage_dir("synth")
    events = dio.read_event_log(synth_dir / "events.jsonl")
    by_stream: dict = {name: [] for name in STREAMS}
    skew = {name: int(v) for name, v in a["stream_offsets_us"].items()}
    for row in events:
        d = skew.get(row["stream"], 0)
        if d:
            row = dict(row, t_us=int(row["t_us"]) + d)
        by_stream[row["stream"]].append(row)
    times = {name: np.array([r["t_us"] for r in rows], dtype=np.int64)
             for name, rows in by_stream.items()}

    frames = _FrameCache(cfg.out_root)
    grid = cfg.grid
    out_rel = f"align-{cfg.config_hash}"
    (out / "crops").mkdir()

    records = []
    discarded = {"temporal": 0, "projection": 0, "no_match": 0}
    max_samples = a["max_samples"]
    anchors = by_stream["vehicle_rgb"]
    for anchor in anchors:
        if max_samples is not None and len(records) >= max_samples:
            break
        match = match_temporal(int(anchor["t_us"]), times, int(a["max_offset_us"]))
        if match is None:
            discarded["temporal"] += 1
            continue
        aerial_row = by_stream["aerial_rgb"][match.indices["aerial_rgb"]]
        gnss_row = by_stream["gnss_imu"][match.indices["gnss_imu"]]
        frame = frames.get(aerial_row)
        try:
            prior = project_gnss_to_pixel(frame, gnss_row["x"], gnss_row["y"])
        except ProjectionOutOfFrameError:
            discarded["projection"] += 1
            continue
        heading = float(gnss_row["heading_rad"])
        template = render_marker_template(
            heading_in_image(heading, frame.cam.yaw_rad), frame.gsd_m
        )
        located = refine_by_template(
            frame.image,
            prior,
            template,
            window_px=int(a["window_px"]),
            min_confidence=float(a["min_confidence"]),
        )
        if located is None:
            discarded["no_match"] += 1
            continue
        ex, ey = world_of_pixel(
            frame.cam, frame.gsd_m, frame.size_px[0], located.u, located.v
        )
        sample = AlignedSample(
            anchor_t_us=int(anchor["t_us"]),
            ego_pose=Pose2D(float(ex), float(ey), heading),
            ego_pixel=(located.u, located.v),
            match_confidence=located.confidence,
            offsets_us=dict(match.offsets_us),
        )
        crop = make_bev_crop(frame, sample.ego_pixel, heading, grid)

        sid = f"s{len(records):04d}"
        crop_rgb_rel = f"{out_rel}/crops/{sid}.bevr"
        crop_lab_rel = f"{out_rel}/crops/{sid}.png"
        dio.write_bevr(
            out / "crops" / f"{sid}.bevr",
            {
                "r": crop.rgb[:, :, 0],
                "g": crop.rgb[:, :, 1],
                "b": crop.rgb[:, :, 2],
                "valid": crop.valid.astype(np.uint8),
            },
        )
        dio.save_semantics_png(out / "crops" / f"{sid}.png", crop.labels)

        lidar_a_row = by_stream["lidar_a"][match.indices["lidar_a"]]
        lidar_b_row = by_stream["lidar_b"][match.indices["lidar_b"]]
        records.append(
            {
                "sample_id": sid,
                "files": {
                    "aerial_rgb": aerial_row["frame"],
                    "aerial_labels": aerial_row["labels"],
                    "lidar_a": lidar_a_row["points"],
                    "lidar_b": lidar_b_row["points"],
                    "crop_rgb": crop_rgb_rel,
                    "crop_labels": crop_lab_rel,
                },
                "offsets_us": {k: int(v) for k, v in sample.offsets_us.items()},
                "ego_pose": [sample.ego_pose.x, sample.ego_pose.y, sample.ego_pose.heading_rad],
                "ego_pixel": [float(located.u), float(located.v)],
                "match_confidence": float(sample.match_confidence),
                "grid": {"extent_m": grid.extent_m, "size_px": grid.size_px},
                "config_hash": cfg.config_hash,
                "split": None,
                "anchor_t_us": int(anchor["t_us"]),
                "ego_pose_true": list(anchor["pose"]),
                "ncc": float(located.ncc),
            }
        )
    dio.write_manifest(out / "manifest.jsonl", records)
    return {
        "dir": out_rel,
        "anchors": len(anchors),
        "retained": len(records),
        "discarded": discarded,
    }


# ---------------------------------------------------------------- rasterize


def _stage_rasterize(cfg: PipelineConfig, out: Path) -> dict:
    r = cfg.raw["raster"]
    records = dio.read_manifest(cfg.stage_dir("align") / "manifest.jsonl")
    grid = cfg.grid
    out_rel = f"rasterize-{cfg.config_hash}"
    (out / "rasters").mkdir()
    height_range = (float(r["height_range"][0]), float(r["height_range"][1]))
    cap = int(r["density_cap"])

    def build(rec: dict) -> tuple:
        clouds = [
            dio.read_points(cfg.out_root / rec["files"][key]).xyz.astype(np.float64)
            for key in ("lidar_a", "lidar_b")
        ]
        raster = rasterize_lidar(clouds, grid=grid, height_range=height_range, density_cap=cap)
        rel = f"{out_rel}/rasters/{rec['sample_id']}.bevr"
        dio.write_bevr(
            out / "rasters" / f"{rec['sample_id']}.bevr",
            {
                "occupancy": raster.occupancy.astype(np.float32),
                "height": raster.height.astype(np.float32),
                "density": raster.density.astype(np.float32),
                "counts": raster.counts.astype(np.float32),
            },
        )
        updated = dict(rec)
        updated["files"] = {**rec["files"], "raster": rel}
        return updated, int(raster.counts.sum())

    results = _pmap(build, records)
    updated = [rec for rec, _ in results]
    dio.write_manifest(out / "manifest.jsonl", updated)
    return {
        "dir": out_rel,
        "samples": len(updated),
        "returns_binned": int(sum(n for _, n in results)),
    }


# --------------------------------------------------------------------- fuse


def _stage_fuse(cfg: PipelineConfig, out: Path) -> dict:
    records = dio.read_manifest(cfg.stage_dir("rasterize") / "manifest.jsonl")
    thresholds = cfg.thresholds
    min_returns = int(cfg.raw["visibility"]["min_returns"])
    noise = cfg.raw["teachers"]
    cone = cfg.cone_mask()
    out_rel = f"fuse-{cfg.config_hash}"
    (out / "fused").mkdir()

    def build(rec: dict) -> tuple:
        labels = dio.load_semantics_png(cfg.out_root / rec["files"]["crop_labels"])
        counts = dio.read_bevr(cfg.out_root / rec["files"]["raster"])["counts"].astype(np.int64)

        tree_mask = labels == int(ClassId.TREE)
        vru = labels == int(ClassId.VRU)
        # stand-in teacher heads: a softened pedestrian probability and a
        # flat structural confidence that dies on invalid cells
        ped_prob = ndimage.uniform_filter(
            np.where(vru, 0.97, 0.03), size=3, mode="nearest"
        )
        struct = labels.copy()
        struct[vru | tree_mask | (labels == 255)] = int(ClassId.ROAD)
        conf = np.where(labels != 255, 0.95, 0.0)

        # corrupt the teachers; keyed to the sample id, not thread order
        rng = np.random.default_rng([cfg.seed, 0xF05E, int(rec["sample_id"][1:])])
        flip = rng.random(labels.shape) < float(noise["label_flip"])
        struct = np.where(
            flip, (struct + rng.integers(1, 4, size=labels.shape)) % 4, struct
        ).astype(np.uint8)
        conf[rng.random(labels.shape) < float(noise["conf_dropout"])] = 0.2

        fused = fuse_pseudo_labels(struct, conf, ped_prob, thresholds, tree_mask=tree_mask)
        fused = restrict_vehicles_to_visible(fused, counts, min_returns=min_returns)
        fused = np.array(fused.data, dtype=np.uint8)
        fused[~cone] = 255  # outside the forward cone nothing is supervised

        rel = f"{out_rel}/fused/{rec['sample_id']}.png"
        dio.save_semantics_png(out / "fused" / f"{rec['sample_id']}.png", fused)
        updated = dict(rec)
        updated["files"] = {**rec["files"], "fused": rel}
        return updated, float((fused == 255).mean())

    results = _pmap(build, records)
    updated = [rec for rec, _ in results]
    dio.write_manifest(out / "manifest.jsonl", updated)
    voids = [v for _, v in results]
    return {
        "dir": out_rel,
        "samples": len(updated),
        "mean_void_fraction": float(np.mean(voids)) if voids else None,
    }


# -------------------------------------------------------------------- split


def _stage_split(cfg: PipelineConfig, out: Path) -> dict:
    sp = cfg.raw["split"]
    records = dio.read_manifest(cfg.stage_dir("fuse") / "manifest.jsonl")
    if records:
        poses = np.array([rec["ego_pose"][:2] for rec in records])
        assignment = dio.split_by_trajectory(
            poses,
            fractions=dict(sp["fractions"]),
            min_segment_m=float(sp["min_segment_m"]),
            guard_gap_m=float(sp["guard_gap_m"]),
        )
        updated = []
        for rec, label in zip(records, assignment.labels):
            row = dict(rec)
            row["split"] = label
            updated.append(row)
        counts = assignment.counts()
        dropped = assignment.dropped
        segments = [list(seg) for seg in assignment.segments]
    else:
        updated, counts, dropped, segments = [], {}, 0, []
    dio.write_manifest(out / "manifest.jsonl", updated)
    return {
        "dir": f"split-{cfg.config_hash}",
        "samples": len(updated),
        "split_counts": counts,
        "dropped_in_guard": dropped,
        "segments": segments,
    }


# --------------------------------------------------------------------- eval


def _finite_or_none(x: float):
    return float(x) if math.isfinite(x) else None


def _colorize(labels: np.ndarray) -> np.ndarray:
    lut = np.zeros((256, 3), dtype=np.uint8)
    for code, rgb in dio.SEMANTIC_PALETTE.items():
        lut[code] = rgb
    return lut[labels]


def _mean(vals: list):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def _stage_eval(cfg: PipelineConfig, out: Path) -> dict:
    records = dio.read_manifest(cfg.stage_dir("split") / "manifest.jsonl")
    cone = cfg.cone_mask()

    def score(rec: dict) -> dict:
        gt = dio.load_semantics_png(cfg.out_root / rec["files"]["crop_labels"])
        fused = dio.load_semantics_png(cfg.out_root / rec["files"]["fused"])
        ch = dio.read_bevr(cfg.out_root / rec["files"]["crop_rgb"])
        rgb = np.stack([ch["r"], ch["g"], ch["b"]], axis=-1)
        cm = confusion(fused, gt, eval_mask=cone)
        rep = iou_report(cm)
        recon = _colorize(fused)
        return {
            "sample_id": rec["sample_id"],
            "split": rec["split"],
            "miou_all": rep.miou_all,
            "miou_static": rep.miou_static,
            "miou_dyn": rep.miou_dyn,
            "accuracy": rep.accuracy,
            "ignored_fraction": rep.ignored_fraction,
            "psnr_db": _finite_or_none(psnr(recon, rgb)),
            "ssim": _finite_or_none(ssim(recon, rgb)),
            "_cm": cm,
        }

    rows = _pmap(score, records)

    buckets: dict = {}
    for row in rows:
        for key in ("all", row["split"] if row["split"] is not None else "unsplit"):
            buckets.setdefault(key, []).append(row)

    def summarize(group: list) -> dict:
        total = group[0]["_cm"]
        for row in group[1:]:
            total = total + row["_cm"]
        rep = iou_report(total)
        return {
            "n_samples": len(group),
            "micro": rep.to_dict(),
            "macro_miou": _mean([r["miou_all"] for r in group]),
            "psnr_db": _mean([r["psnr_db"] for r in group]),
            "ssim": _mean([r["ssim"] for r in group]),
        }

    tables = {name: summarize(group) for name, group in sorted(buckets.items())}
    for row in rows:
        del row["_cm"]
    dio.write_jsonl(out / "per_sample.jsonl", rows)
    _write_json(
        out / "eval.json",
        {
            "config_hash": cfg.config_hash,
            "grid": cfg.raw["grid"],
            "tables": tables,
        },
    )
    return {
        "dir": f"eval-{cfg.config_hash}",
        "samples": len(rows),
        "splits": {k: v["n_samples"] for k, v in tables.items()},
    }


# ------------------------------------------------------------------- report


def _fmt(x, digits=4) -> str:
    if x is None:
        return "-"
    return f"{x:.{digits}f}"


def _stage_report(cfg: PipelineConfig, out: Path) -> dict:
    ev = _read_json(cfg.stage_dir("eval") / "eval.json")
    lines = [
        "# Pipeline report",
        "",
        f"Config hash: `{ev['config_hash']}`",
        f"Grid: {ev['grid']['extent_m']} m / {ev['grid']['size_px']} px",
        "",
        "| split | samples | mIoU (micro) | mIoU (macro) | accuracy | ignored | PSNR dB | SSIM |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for name, table in ev["tables"].items():
        micro = table["micro"]
        lines.append(
            "| {} | {} | {} | {} | {} | {} | {} | {} |".format(
                name,
                table["n_samples"],
                _fmt(micro["miou_all"]),
                _fmt(table["macro_miou"]),
                _fmt(micro["accuracy"]),
                _fmt(micro["ignored_fraction"]),
                _fmt(table["psnr_db"], 2),
                _fmt(table["ssim"]),
            )
        )
    if "all" in ev["tables"]:
        lines += ["", "## Per-class IoU (all samples, micro)", ""]
        per_class = ev["tables"]["all"]["micro"]["per_class_iou"]
        names = {0: "road", 1: "sidewalk", 2: "building", 3: "vehicle", 4: "vru"}
        lines.append("| class | IoU |")
        lines.append("|---|---|")
        for code in sorted(int(k) for k in per_class):
            lines.append(f"| {names.get(code, code)} | {_fmt(per_class[str(code)])} |")
    text = "\n".join(lines) + "\n"
    (out / "report.md").write_text(text)
    return {"dir": f"report-{cfg.config_hash}", "bytes": len(text)}


_STAGE_FNS = {
    "synth": _stage_synth,
    "align": _stage_align,
    "rasterize": _stage_rasterize,
    "fuse": _stage_fuse,
    "split": _stage_split,
    "eval": _stage_eval,
    "report": _stage_report,
}
