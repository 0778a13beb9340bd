import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from boxcal.data import BBox, Detection, DetectionSet, GroundTruthObject, GroundTruthSet
from boxcal.exceptions import ParameterError
from boxcal.matching import iou, iou_matrix, match, nms


def _det(*specs):
    return DetectionSet(tuple(Detection(img, cat, BBox(*box), c) for img, cat, box, c in specs))


def _gt(*specs):
    return GroundTruthSet(
        tuple(GroundTruthObject(img, cat, BBox(*box), ign, gid) for gid, (img, cat, box, ign) in enumerate(specs, 1))
    )


def test_iou_examples():
    assert iou(BBox(0, 0, 2, 2), BBox(0, 0, 2, 2)) == 1.0
    assert iou(BBox(0, 0, 2, 2), BBox(4, 4, 1, 1)) == 0.0
    assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 2, 2)) == pytest.approx(1 / 7)


def test_iou_matrix_matches_scalar():
    a = np.array([[0, 0, 2, 2], [1, 1, 3, 1]], dtype=float)
    b = np.array([[0, 0, 2, 2], [1, 1, 2, 2], [9, 9, 1, 1]], dtype=float)
    m = iou_matrix(a, b)
    for i in range(2):
        for j in range(3):
            assert m[i, j] == pytest.approx(iou(BBox(*a[i]), BBox(*b[j])))


def test_duplicate_detection_is_fp():
    det = _det((1, 1, (0, 0, 2, 2), 0.9), (1, 1, (0.1, 0.1, 2, 2), 0.8))
    lab = match(det, _gt((1, 1, (0, 0, 2, 2), False)), 0.5)
    assert lab.tp.tolist() == [True, False]
    assert lab.labels[0].matched_gt == 1 and lab.labels[1].matched_gt is None


def test_no_gt_all_fp_and_empty_detections():
    det = _det((1, 1, (0, 0, 2, 2), 0.9), (2, 1, (0, 0, 2, 2), 0.3))
    lab = match(det, _gt((3, 1, (0, 0, 2, 2), False)))
    assert not lab.tp.any() and not lab.ignored.any()
    empty = match(DetectionSet(), _gt((1, 1, (0, 0, 2, 2), False), (1, 1, (5, 5, 2, 2), False)))
    assert len(empty) == 0 and empty.gt_count(1) == 2


def test_crowd_overlap_is_ignored():
    gt = _gt((1, 1, (0, 0, 10, 10), True), (1, 1, (20, 20, 2, 2), False))
    lab = match(_det((1, 1, (0, 0, 10, 10), 0.9)), gt)
    assert lab.ignored.tolist() == [True] and lab.gt_count(1) == 1


def test_highest_iou_gt_wins_then_lowest_id():
    gt = _gt((1, 1, (0, 0, 2, 2), False), (1, 1, (0, 0, 2, 2.2), False))
    lab = match(_det((1, 1, (0, 0, 2, 2.2), 0.9)), gt)
    assert lab.labels[0].matched_gt == 2
    gt = _gt((1, 1, (0, 0, 2, 2), False), (1, 1, (0, 0, 2, 2), False))
    lab = match(_det((1, 1, (0, 0, 2, 2), 0.9)), gt)
    assert lab.labels[0].matched_gt == 1


def test_max_dets_caps_per_image():
    det = _det(*[(1, 1, (3 * k, 0, 2, 2), 0.1 + 0.1 * k) for k in range(5)])
    lab = match(det, _gt((1, 1, (0, 0, 2, 2), False)), max_dets=3)
    # the two lowest-confidence detections are beyond the cap
    assert lab.ignored.tolist() == [True, True, False, False, False]


def test_bad_threshold():
    with pytest.raises(ParameterError):
        match(DetectionSet(), GroundTruthSet(), 0.0)
    with pytest.raises(ParameterError):
        nms(DetectionSet(), 1.5)


def test_nms_examples():
    same = _det((1, 1, (0, 0, 2, 2), 0.9), (1, 1, (0, 0, 2, 2), 0.8))
    assert [d.confidence for d in nms(same, 0.5)] == [0.9]
    apart = _det((1, 1, (0, 0, 2, 2), 0.9), (1, 1, (5, 5, 2, 2), 0.8))
    assert len(nms(apart, 0.5)) == 2
    seventh = _det((1, 1, (0, 0, 2, 2), 0.9), (1, 1, (1, 1, 2, 2), 0.8))
    assert len(nms(seventh, 0.5)) == 2


boxes = st.tuples(st.integers(0, 8), st.integers(0, 8), st.integers(1, 4), st.integers(1, 4))
det_specs = st.lists(
    st.tuples(st.integers(1, 2), st.integers(1, 2), boxes, st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9, 1.0])),
    max_size=25,
)
gt_specs = st.lists(st.tuples(st.integers(1, 2), st.integers(1, 2), boxes, st.booleans()), max_size=12)


@given(det_specs, gt_specs, st.sampled_from([0.3, 0.5, 0.75]))
def test_match_invariants(dspec, gspec, t):
    det, gt = _det(*dspec), _gt(*gspec)
    lab = match(det, gt, t)
    for cat in lab.categories:
        idx = det.category_index.get(cat, np.zeros(0, int))
        assert lab.tp[idx].sum() <= lab.gt_count(cat)
    matched = [(det[i].image_id, lab.labels[i].matched_gt) for i in range(len(det)) if lab.tp[i]]
    assert len(matched) == len(set(matched))
    assert all(lab.labels[i].matched_gt is not None for i in range(len(det)) if lab.tp[i])


@given(det_specs, gt_specs, st.randoms(use_true_random=False))
def test_match_permutation_invariant(dspec, gspec, rnd):
    # with distinct confidences the ranking cannot depend on input order
    dspec = [(img, cat, box, (k + 1) / (len(dspec) + 1)) for k, (img, cat, box, _) in enumerate(dspec)]
    perm = list(range(len(dspec)))
    rnd.shuffle(perm)
    gt = _gt(*gspec)
    a = match(_det(*dspec), gt)
    b = match(_det(*[dspec[i] for i in perm]), gt)
    assert [b.tp[perm.index(i)] for i in range(len(dspec))] == a.tp.tolist()


@given(det_specs, gt_specs)
def test_tp_count_non_increasing_in_threshold(dspec, gspec):
    det, gt = _det(*dspec), _gt(*gspec)
    counts = [match(det, gt, t).tp.sum() for t in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


@given(det_specs, st.sampled_from([0.3, 0.5, 0.7]))
def test_nms_idempotent(dspec, t):
    det = _det(*dspec)
    once = nms(det, t)
    assert nms(once, t) == once
    assert len(once) <= len(det)
