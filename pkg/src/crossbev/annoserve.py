"""Annotation review service over a finished pipeline run.

Serves BEV crops with a toggleable LiDAR-return overlay, accepts
per-view mask submissions under optimistic versioning, and reports the
strict-agreement fusion of the two passes live.  The grid, palette and
PNG conventions are exactly datasetio's, so anything exported here
feeds straight back into the pipeline.

The service is read-only with respect to the run it sits on: stage
directories are never touched, exports go to a fresh directory.

State lives in memory.  One process, one annotation session; restart
to reset.  That is deliberate: the review loop this backs is a short
manual pass over a small batch of frames (ten by default).
"""

from __future__ import annotations

import base64
import binascii
import io
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image
from pydantic import BaseModel

from . import datasetio as dio
from .evalmetrics import confusion, iou_report
from .labelfuse import fuse_annotations_strict
from .pipeline import PipelineConfig, PipelineError

# the two independent passes every sample gets; real_bev denotes the
# aerial crop itself and is what both passes are drawn over here, since
# reconstructed views arrive as external inputs when they exist at all
VIEWS = ("recon_a", "recon_b")

ANNOTATION_CODES = frozenset((0, 1, 2, 3, 4, 255))

DEFAULT_BATCH = 10

_OVERLAY_RED = (230, 40, 40)


@dataclass
class _Task:
    task_id: str
    sample_id: str
    view: str
    status: str = "open"
    annotator_id: str | None = None
    version: int = 0
    mask: np.ndarray | None = None

    def summary(self) -> dict:
        return {
            "task_id": self.task_id,
            "sample_id": self.sample_id,
            "view": self.view,
            "status": self.status,
            "annotator_id": self.annotator_id,
            "version": self.version,
        }


class MaskSubmission(BaseModel):
    annotator_id: str
    expected_version: int
    mask_png_b64: str


class ExportRequest(BaseModel):
    sample_ids: list[str] | None = None
    out_dir: str | None = None


@dataclass
class _State:
    config: PipelineConfig
    records: dict
    tasks: dict
    lock: threading.Lock = field(default_factory=threading.Lock)


def _find_manifest(config: PipelineConfig) -> list:
    # the furthest stage wins so split tags ride along into exports
    for stage in ("split", "fuse", "rasterize"):
        path = config.stage_dir(stage) / "manifest.jsonl"
        if path.is_file():
            return dio.read_manifest(path)
    raise PipelineError(
        "annotation service needs a manifest with rasters; "
        "run the pipeline through at least the rasterize stage"
    )


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _rgb_png(config: PipelineConfig, rec: dict) -> bytes:
    ch = dio.read_bevr(config.out_root / rec["files"]["crop_rgb"])
    rgb = np.stack([ch["r"], ch["g"], ch["b"]], axis=-1)
    sink = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(sink, format="PNG")
    return sink.getvalue()


def _lidar_png(config: PipelineConfig, rec: dict) -> bytes:
    """Transparent layer, red wherever a return was binned; denser
    cells are more opaque."""
    counts = dio.read_bevr(config.out_root / rec["files"]["raster"])["counts"]
    h, w = counts.shape
    rgba = np.zeros((h, w, 4), dtype=np.uint8)
    hit = counts > 0
    rgba[..., 0][hit] = _OVERLAY_RED[0]
    rgba[..., 1][hit] = _OVERLAY_RED[1]
    rgba[..., 2][hit] = _OVERLAY_RED[2]
    rgba[..., 3] = np.where(hit, np.clip(96 + 24 * counts, 0, 255), 0).astype(np.uint8)
    sink = io.BytesIO()
    Image.fromarray(rgba, mode="RGBA").save(sink, format="PNG")
    return sink.getvalue()


def _decode_mask(payload: str, size_px: int) -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError):
        raise HTTPException(status_code=422, detail="mask_png_b64 is not valid base64")
    try:
        mask = dio.decode_semantics_png(raw)
    except dio.CorruptFileError as exc:
        raise HTTPException(status_code=422, detail=f"mask is not a palette PNG: {exc}")
    if mask.shape != (size_px, size_px):
        raise HTTPException(
            status_code=422,
            detail=f"mask is {mask.shape[0]}x{mask.shape[1]}, grid wants {size_px}x{size_px}",
        )
    bad = sorted(set(np.unique(mask).tolist()) - ANNOTATION_CODES)
    if bad:
        raise HTTPException(
            status_code=422,
            detail=f"mask carries codes outside the annotation taxonomy: {bad}",
        )
    return mask


def build_app(config: PipelineConfig, batch: int = DEFAULT_BATCH) -> FastAPI:
    """Assemble the service over the run at ``config.out_dir``."""
    records = _find_manifest(config)[:batch]
    tasks: dict = {}
    for rec in records:
        for view in VIEWS:
            tid = f"{rec['sample_id']}:{view}"
            tasks[tid] = _Task(task_id=tid, sample_id=rec["sample_id"], view=view)
    state = _State(
        config=config,
        records={rec["sample_id"]: rec for rec in records},
        tasks=tasks,
    )

    app = FastAPI(title="crossbev annotation review")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.anno = state  # exposed for tests

    size_px = int(config.raw["grid"]["size_px"])

    def _task_or_404(task_id: str) -> _Task:
        task = state.tasks.get(task_id)
        if task is None:
            raise HTTPException(status_code=404, detail=f"no task {task_id!r}")
        return task

    def _fused_or_404(sample_id: str):
        if sample_id not in state.records:
            raise HTTPException(status_code=404, detail=f"no sample {sample_id!r}")
        masks = {}
        with state.lock:
            for view in VIEWS:
                task = state.tasks[f"{sample_id}:{view}"]
                if task.status != "submitted":
                    raise HTTPException(
                        status_code=404,
                        detail=f"fusion needs both views; {view} not submitted yet",
                    )
                masks[view] = (task.mask, task.version)
        fused = fuse_annotations_strict(masks["recon_a"][0], masks["recon_b"][0])
        versions = {view: v for view, (_, v) in masks.items()}
        return fused, versions

    @app.get("/tasks")
    def list_tasks() -> list:
        with state.lock:
            return [t.summary() for t in state.tasks.values()]

    @app.get("/tasks/{task_id}/frame")
    def get_frame(task_id: str) -> dict:
        task = _task_or_404(task_id)
        rec = state.records[task.sample_id]
        grid = rec["grid"]
        return {
            "task_id": task.task_id,
            "sample_id": task.sample_id,
            "view": task.view,
            "grid": {
                "extent_m": grid["extent_m"],
                "size_px": grid["size_px"],
                "cell_m": grid["extent_m"] / grid["size_px"],
            },
            "base_png_b64": _b64(_rgb_png(config, rec)),
            "lidar_png_b64": _b64(_lidar_png(config, rec)),
        }

    @app.put("/tasks/{task_id}/mask")
    def submit_mask(task_id: str, body: MaskSubmission) -> dict:
        task = _task_or_404(task_id)
        mask = _decode_mask(body.mask_png_b64, size_px)
        with state.lock:
            if body.expected_version != task.version:
                raise HTTPException(
                    status_code=409,
                    detail={
                        "message": f"stale version {body.expected_version}",
                        "current_version": task.version,
                    },
                )
            task.mask = mask
            task.version += 1
            task.status = "submitted"
            task.annotator_id = body.annotator_id
            return {"task_id": task.task_id, "version": task.version, "status": task.status}

    @app.get("/samples/{sample_id}/fusion")
    def get_fusion(sample_id: str) -> dict:
        fused, versions = _fused_or_404(sample_id)
        return {
            "sample_id": sample_id,
            "void_fraction": fused.fraction(255),
            "versions": versions,
            "mask_png_b64": _b64(dio.encode_semantics_png(fused.data)),
        }

    @app.get("/samples/{sample_id}/report")
    def get_report(sample_id: str) -> dict:
        fused, versions = _fused_or_404(sample_id)
        rec = state.records[sample_id]
        reference = dio.load_semantics_png(config.out_root / rec["files"]["crop_labels"])
        rep = iou_report(confusion(fused, reference))
        return {
            "sample_id": sample_id,
            "versions": versions,
            "void_fraction": fused.fraction(255),
            **rep.to_dict(),
        }

    @app.post("/export")
    def export(body: ExportRequest) -> dict:
        with state.lock:
            complete = [
                sid
                for sid in state.records
                if all(state.tasks[f"{sid}:{v}"].status == "submitted" for v in VIEWS)
            ]
        if body.sample_ids is None:
            chosen = complete
        else:
            unknown = [s for s in body.sample_ids if s not in state.records]
            if unknown:
                raise HTTPException(status_code=404, detail=f"no samples {unknown}")
            pending = [s for s in body.sample_ids if s not in complete]
            if pending:
                raise HTTPException(
                    status_code=409,
                    detail=f"both views must be submitted before export: {pending}",
                )
            chosen = list(body.sample_ids)

        out_dir = Path(body.out_dir) if body.out_dir else config.out_root / "annoexport"
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
        rows = []
        voids = []
        for sid in chosen:
            fused, versions = _fused_or_404(sid)
            rel = f"masks/{sid}.png"
            dio.save_semantics_png(out_dir / rel, fused.data)
            src = state.records[sid]
            rows.append(
                {
                    **{k: src[k] for k in dio.MANIFEST_FIELDS if k != "files"},
                    "files": {"annotation": rel},
                    "void_fraction": fused.fraction(255),
                    "versions": versions,
                }
            )
            voids.append(fused.fraction(255))
        dio.write_manifest(out_dir / "manifest.jsonl", rows)
        return {
            "dir": str(out_dir),
            "exported": chosen,
            "mean_void_fraction": float(np.mean(voids)) if voids else None,
        }

    return app
