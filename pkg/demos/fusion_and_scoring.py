#!/usr/bin/env python3
"""Fuse two disagreeing teachers into pseudo-labels, then score them.

Everything here runs on one rendered scene. The structural teacher is
the ground truth with some labels flipped; the pedestrian head is a
blurred hit map. The fusion keeps a cell only when the teachers are
jointly unambiguous, so accuracy on the kept cells beats the flipped
teacher while the rest lands in the void class.
"""

import numpy as np
from scipy.ndimage import gaussian_filter

from crossbev.evalmetrics import confusion, iou_report
from crossbev.labelfuse import FusionThresholds, fuse_pseudo_labels
from crossbev.synthworld import CameraPose, generate_world, render_aerial

CLASS_NAMES = {0: "road", 1: "sidewalk", 2: "building", 3: "vehicle", 4: "vru"}


def main() -> int:
    rng = np.random.default_rng(5)
    world = generate_world(37, extent_m=120.0,
                           counts={"road": 2, "building": 8, "tree": 10, "vehicle": 5, "vru": 20})
    frame = render_aerial(world, CameraPose(60.0, 60.0, 0.0), 0.2, 600)
    gt = frame.gt_semantics

    # structural teacher: correct labels, minus the vru class it cannot
    # see, with 8% flipped; the confidence head notices most flips but
    # not all of them, and sometimes loses its nerve on clean cells too
    tree = gt == 254
    struct = np.where((gt == 4) | (gt == 255), 0, gt).astype(np.uint8)
    flip = ~tree & (rng.random(gt.shape) < 0.08)
    struct = np.where(flip, (struct + rng.integers(1, 4, gt.shape)) % 4, struct).astype(np.uint8)
    struct[tree] = 254
    noticed = flip & (rng.random(gt.shape) < 0.7)
    jitters = ~flip & (rng.random(gt.shape) < 0.05)
    conf = np.where(noticed | jitters, 0.35, 0.95) + rng.normal(0, 0.02, gt.shape)
    conf = np.clip(conf, 0.0, 1.0)

    # pedestrian teacher: a smeared indicator of the true vru cells
    ped = gaussian_filter((gt == 4).astype(np.float64), sigma=2.0)
    ped = np.clip(ped / max(ped.max(), 1e-9), 0.0, 1.0)

    th = FusionThresholds()
    fused = fuse_pseudo_labels(struct, conf, ped, th)
    labels = np.asarray(fused.data)

    kept = labels != 255
    print(f"thresholds        ped>={th.tau_ped_hi}  ped<={th.tau_ped_lo}  conf>={th.tau_c}")
    print(f"kept cells        {kept.mean():5.1%}")
    print(f"void cells        {(~kept).mean():5.1%}")

    rep = iou_report(confusion(labels, gt))
    print(f"accuracy (kept)   {rep.accuracy:.4f}")
    print(f"mIoU              {rep.miou_all:.4f}")
    for cls, iou in rep.per_class_iou.items():
        shown = "undefined" if iou is None else f"{iou:.4f}"
        print(f"  {CLASS_NAMES[cls]:<9} {shown}")

    # compare against trusting the structural teacher outright
    raw = iou_report(confusion(struct, gt))
    print(f"\nstructural teacher alone: accuracy {raw.accuracy:.4f}, mIoU {raw.miou_all:.4f}")
    print("fusion trades coverage for correctness; the void cells are the price")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
