"""Cross-view BEV supervision toolkit.

Builds vehicle-centric bird's-eye-view training targets by aligning
nadir aerial imagery with ground-vehicle sensor logs: temporal anchor
matching, GNSS-seeded template registration, LiDAR rasterization,
tri-state pseudo-label fusion, evaluation with ignore semantics, and
binary dataset containers with end-to-end corruption detection.

The annotation review service lives in :mod:`crossbev.annoserve`; it
is not imported here so the library stays cheap to import.
"""

from . import bevraster, core, crossview, datasetio, evalmetrics, labelfuse, pipeline, synthworld
from .bevraster import rasterize_lidar, visibility_cone_mask
from .core import (
    BevGridSpec,
    BinaryMask,
    ClassId,
    Pose2D,
    ProbabilityMap,
    ScalarMap,
    SemanticMask,
)
from .crossview import make_bev_crop, match_temporal, refine_by_template
from .datasetio import split_by_trajectory
from .evalmetrics import confusion, iou_report, psnr, ssim
from .labelfuse import FusionThresholds, fuse_annotations_strict, fuse_pseudo_labels
from .pipeline import load_config, run_pipeline, run_stage

__version__ = "0.1.0"

__all__ = [
    "core",
    "synthworld",
    "crossview",
    "bevraster",
    "labelfuse",
    "evalmetrics",
    "datasetio",
    "pipeline",
    "ClassId",
    "Pose2D",
    "BevGridSpec",
    "SemanticMask",
    "ProbabilityMap",
    "ScalarMap",
    "BinaryMask",
    "match_temporal",
    "refine_by_template",
    "make_bev_crop",
    "rasterize_lidar",
    "visibility_cone_mask",
    "FusionThresholds",
    "fuse_pseudo_labels",
    "fuse_annotations_strict",
    "confusion",
    "iou_report",
    "psnr",
    "ssim",
    "split_by_trajectory",
    "load_config",
    "run_pipeline",
    "run_stage",
    "__version__",
]
