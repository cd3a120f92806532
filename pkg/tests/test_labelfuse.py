import numpy as np
import pytest

from crossbev.core import ProbabilityMap, SemanticMask
from crossbev.labelfuse import (
    DEFAULT_THRESHOLDS,
    FusionThresholds,
    argmax_confidence,
    fuse_annotations_strict,
    fuse_pseudo_labels,
)


# Literal transcription of the tri-state policy, scalar, used as oracle.
def tri_state_oracle(p_ped, conf, label, tree, th=DEFAULT_THRESHOLDS):
    if p_ped >= th.tau_ped_hi:
        out = 4
    elif p_ped <= th.tau_ped_lo and conf >= th.tau_c:
        out = label
    else:
        out = 255
    return 255 if tree else out


def test_threshold_validation():
    FusionThresholds(0.9, 0.3, 0.8)
    with pytest.raises(ValueError):
        FusionThresholds(tau_ped_hi=0.3, tau_ped_lo=0.3)
    with pytest.raises(ValueError):
        FusionThresholds(tau_ped_hi=1.5)
    with pytest.raises(ValueError):
        FusionThresholds(tau_ped_lo=-0.1)
    with pytest.raises(ValueError):
        FusionThresholds(tau_c=1.01)


def test_argmax_confidence_examples():
    probs = np.array([[[0.1, 0.7, 0.15, 0.05]]])
    label, conf = argmax_confidence(probs)
    assert label.data[0, 0] == 1
    assert conf.data[0, 0] == 0.7
    # ties pick the lowest code
    label, conf = argmax_confidence(np.array([[[0.5, 0.5, 0.0, 0.0]]]))
    assert label.data[0, 0] == 0
    assert conf.data[0, 0] == 0.5


def test_argmax_confidence_canopy_channel():
    probs = np.array([[[0.1, 0.1, 0.1, 0.1, 0.6]]])
    label, conf = argmax_confidence(probs)
    assert label.data[0, 0] == 254
    assert conf.data[0, 0] == 0.6


def test_argmax_confidence_rejects_wrong_channel_count():
    with pytest.raises(ValueError):
        argmax_confidence(np.full((2, 2, 3), 1 / 3))
    with pytest.raises(ValueError):
        argmax_confidence(np.full((2, 2, 6), 1 / 6))


def test_argmax_confidence_rejects_unnormalized():
    with pytest.raises(ValueError):
        argmax_confidence(np.full((2, 2, 4), 0.3))


def test_argmax_matches_per_cell_scan():
    rng = np.random.default_rng(17)
    raw = rng.random((20, 20, 4))
    probs = raw / raw.sum(axis=2, keepdims=True)
    label, conf = argmax_confidence(probs)
    for r in range(20):
        for c in range(20):
            cell = probs[r, c]
            best = max(range(4), key=lambda k: (cell[k], -k))
            assert label.data[r, c] == best
            assert conf.data[r, c] == cell[best]


def test_fusion_worked_examples():
    shape = (1, 5)
    lab = np.zeros(shape, dtype=np.uint8)  # road everywhere
    conf = np.array([[0.99, 0.85, 0.75, 0.85, 0.99]])
    ped = np.array([[0.95, 0.2, 0.2, 0.5, 0.99]])
    tree = np.array([[False, False, False, False, True]])
    out = fuse_pseudo_labels(lab, conf, ped, tree_mask=tree).data[0]
    assert out[0] == 4  # confident pedestrian wins
    assert out[1] == 0  # low ped + confident structure keeps road
    assert out[2] == 255  # structure not confident enough
    assert out[3] == 255  # pedestrian score in the dead zone
    assert out[4] == 255  # canopy beats even a confident pedestrian


def test_fusion_truth_table_101x101():
    vals = np.linspace(0.0, 1.0, 101)
    ped, conf = np.meshgrid(vals, vals, indexing="ij")
    for label in (0, 1, 2, 3):
        lab = np.full(ped.shape, label, dtype=np.uint8)
        for tree_on in (False, True):
            tree = np.full(ped.shape, tree_on)
            got = fuse_pseudo_labels(lab, conf, ped, tree_mask=tree).data
            want = np.empty_like(got)
            for i in range(101):
                for j in range(101):
                    want[i, j] = tri_state_oracle(ped[i, j], conf[i, j], label, tree_on)
            np.testing.assert_array_equal(got, want)


def test_fusion_canopy_code_in_labels_acts_as_tree_mask():
    lab = np.array([[254]], dtype=np.uint8)
    out = fuse_pseudo_labels(lab, np.array([[0.99]]), np.array([[0.0]]))
    assert out.data[0, 0] == 255


def test_fusion_rejects_bad_inputs():
    with pytest.raises(ValueError):
        fuse_pseudo_labels(
            np.array([[4]], dtype=np.uint8), np.array([[0.9]]), np.array([[0.1]])
        )  # vru is not a structural teacher output
    with pytest.raises(ValueError):
        fuse_pseudo_labels(
            np.zeros((2, 2), dtype=np.uint8), np.zeros((2, 3)), np.zeros((2, 2))
        )  # shape mismatch
    with pytest.raises(ValueError):
        fuse_pseudo_labels(
            np.zeros((1, 1), dtype=np.uint8), np.array([[1.2]]), np.array([[0.1]])
        )  # confidence out of range


def test_raising_tau_c_only_removes_structural_cells():
    rng = np.random.default_rng(3)
    lab = rng.integers(0, 4, (64, 64)).astype(np.uint8)
    conf = rng.random((64, 64))
    ped = rng.random((64, 64))
    lower = fuse_pseudo_labels(lab, conf, ped, FusionThresholds(tau_c=0.5)).data
    higher = fuse_pseudo_labels(lab, conf, ped, FusionThresholds(tau_c=0.9)).data
    structural = lambda m: (m <= 3) & (m != 255)
    assert not (structural(higher) & ~structural(lower)).any()


def test_raising_tau_hi_only_removes_vru_cells():
    rng = np.random.default_rng(4)
    lab = rng.integers(0, 4, (64, 64)).astype(np.uint8)
    conf = rng.random((64, 64))
    ped = rng.random((64, 64))
    lower = fuse_pseudo_labels(lab, conf, ped, FusionThresholds(tau_ped_hi=0.7)).data
    higher = fuse_pseudo_labels(lab, conf, ped, FusionThresholds(tau_ped_hi=0.95)).data
    assert not ((higher == 4) & (lower != 4)).any()


def test_tree_override_is_absorbing():
    rng = np.random.default_rng(5)
    lab = rng.integers(0, 4, (32, 32)).astype(np.uint8)
    conf = rng.random((32, 32))
    ped = rng.random((32, 32))
    tree = rng.random((32, 32)) < 0.2
    once = fuse_pseudo_labels(lab, conf, ped, tree_mask=tree).data
    twice = once.copy()
    twice[tree] = 255
    np.testing.assert_array_equal(once, twice)
    assert (once[tree] == 255).all()


def test_strict_fusion_examples():
    a = np.array([[0, 0, 0]], dtype=np.uint8)
    b = np.array([[0, 1, 255]], dtype=np.uint8)
    fused = fuse_annotations_strict(a, b).data
    assert fused.tolist() == [[0, 255, 255]]


def test_strict_fusion_idempotent_and_commutative():
    rng = np.random.default_rng(6)
    codes = np.array([0, 1, 2, 3, 4, 255], dtype=np.uint8)
    a = codes[rng.integers(0, len(codes), (40, 40))]
    b = codes[rng.integers(0, len(codes), (40, 40))]
    ab = fuse_annotations_strict(a, b).data
    ba = fuse_annotations_strict(b, a).data
    aa = fuse_annotations_strict(a, a).data
    np.testing.assert_array_equal(ab, ba)
    np.testing.assert_array_equal(aa, a)
    # fusing the fusion with either input changes nothing
    np.testing.assert_array_equal(fuse_annotations_strict(ab, a).data, ab)


def test_strict_fusion_support_is_agreement_set():
    rng = np.random.default_rng(8)
    codes = np.array([0, 1, 2, 255], dtype=np.uint8)
    a = codes[rng.integers(0, len(codes), (50, 50))]
    b = codes[rng.integers(0, len(codes), (50, 50))]
    fused = fuse_annotations_strict(a, b).data
    agree = (a == b) & (a != 255)
    np.testing.assert_array_equal(fused != 255, agree)
    void_frac = lambda m: float(np.mean(m == 255))
    assert void_frac(fused) >= max(void_frac(a), void_frac(b))


def test_strict_fusion_accepts_mask_wrappers():
    a = SemanticMask(np.zeros((4, 4), dtype=np.uint8))
    b = SemanticMask(np.full((4, 4), 255, dtype=np.uint8))
    assert (fuse_annotations_strict(a, b).data == 255).all()
