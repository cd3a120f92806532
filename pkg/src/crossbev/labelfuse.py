"""Fusing teacher outputs into dense pseudo-labels, and fusing two human
annotation passes under strict agreement.

The pseudo-label policy is tri-state per cell: a confident pedestrian
score wins outright, a confidently low pedestrian score falls back to
the structural teacher's label if that teacher is itself confident, and
everything in between is ignored.  Canopy cells are forced to IGNORE at
the end regardless of the other inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassId, ProbabilityMap, ScalarMap, SemanticMask

#: Class codes the structural (aerial) teacher may emit.
_STRUCTURAL_CODES = (
    int(ClassId.ROAD),
    int(ClassId.SIDEWALK),
    int(ClassId.BUILDING),
    int(ClassId.VEHICLE),
)

IGNORE = int(ClassId.IGNORE)
TREE = int(ClassId.TREE)
VRU = int(ClassId.VRU)


@dataclass(frozen=True)
class FusionThresholds:
    """Pedestrian high/low gates and the structural confidence gate."""

    tau_ped_hi: float = 0.9
    tau_ped_lo: float = 0.3
    tau_c: float = 0.8

    def __post_init__(self) -> None:
        if not 0.0 < self.tau_ped_hi <= 1.0:
            raise ValueError(f"tau_ped_hi must be in (0, 1], got {self.tau_ped_hi}")
        if not 0.0 <= self.tau_ped_lo < 1.0:
            raise ValueError(f"tau_ped_lo must be in [0, 1), got {self.tau_ped_lo}")
        if not 0.0 <= self.tau_c <= 1.0:
            raise ValueError(f"tau_c must be in [0, 1], got {self.tau_c}")
        if not self.tau_ped_lo < self.tau_ped_hi:
            raise ValueError(
                f"tau_ped_lo must be below tau_ped_hi, got {self.tau_ped_lo} >= {self.tau_ped_hi}"
            )


DEFAULT_THRESHOLDS = FusionThresholds()


def _data(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


def argmax_confidence(probs) -> tuple[SemanticMask, ScalarMap]:
    """Collapse a structural class distribution to (label, confidence).

    Accepts 4 channels (road, sidewalk, building, vehicle) or 5 with a
    trailing canopy channel, which comes back as code 254.  Ties pick
    the lowest class code.
    """
    if not isinstance(probs, ProbabilityMap):
        probs = ProbabilityMap(probs)
    k = probs.num_classes
    if k not in (4, 5):
        raise ValueError(f"expected 4 structural channels (plus optional canopy), got {k}")
    a = probs.data
    idx = np.argmax(a, axis=2)  # first maximum == lowest code on ties
    conf = np.max(a, axis=2)
    label = idx.astype(np.uint8)
    if k == 5:
        label[idx == 4] = TREE
    return SemanticMask(label), ScalarMap(conf)


def fuse_pseudo_labels(
    struct_label,
    struct_conf,
    ped_prob,
    thresholds: FusionThresholds | None = None,
    tree_mask=None,
) -> SemanticMask:
    """Tri-state fusion of the two teachers into one pseudo-label mask.

    Per cell: vru when ped_prob >= tau_ped_hi; the structural label when
    ped_prob <= tau_ped_lo and the structural confidence clears tau_c;
    IGNORE otherwise.  Cells flagged as canopy (via ``tree_mask`` or a
    254 code in ``struct_label``) end up IGNORE no matter what.
    """
    th = thresholds or DEFAULT_THRESHOLDS
    lab = _data(struct_label)
    conf = np.asarray(_data(struct_conf), dtype=np.float64)
    ped = np.asarray(_data(ped_prob), dtype=np.float64)
    if not (lab.shape == conf.shape == ped.shape):
        raise ValueError(
            f"grid mismatch: label {lab.shape}, confidence {conf.shape}, ped {ped.shape}"
        )
    ok_codes = np.isin(lab, _STRUCTURAL_CODES + (TREE,))
    if not ok_codes.all():
        bad = sorted(np.unique(lab[~ok_codes]).tolist())
        raise ValueError(f"structural labels must be road/sidewalk/building/vehicle/canopy, got {bad}")
    for name, a in (("confidence", conf), ("ped probability", ped)):
        if (a < 0).any() or (a > 1).any():
            raise ValueError(f"{name} must lie in [0, 1]")

    tree = lab == TREE
    if tree_mask is not None:
        tm = _data(tree_mask).astype(bool)
        if tm.shape != lab.shape:
            raise ValueError(f"grid mismatch: tree mask {tm.shape} vs label {lab.shape}")
        tree = tree | tm

    out = np.full(lab.shape, IGNORE, dtype=np.uint8)
    ped_hit = ped >= th.tau_ped_hi
    keep_struct = ~ped_hit & (ped <= th.tau_ped_lo) & (conf >= th.tau_c)
    out[ped_hit] = VRU
    out[keep_struct] = lab[keep_struct]
    out[tree] = IGNORE
    return SemanticMask(out)


def fuse_annotations_strict(mask_a, mask_b) -> SemanticMask:
    """Keep a cell's class only where two annotation passes agree.

    Any disagreement, and any cell either annotator left void (255),
    collapses to void.
    """
    a = _data(mask_a)
    b = _data(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    out = np.where((a == b) & (a != IGNORE), a, IGNORE).astype(np.uint8)
    return SemanticMask(out)
