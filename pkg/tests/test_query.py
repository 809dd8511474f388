"""Tests for retrieval, classification and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pytest

from panmap.query import (
    cell_keys,
    classify,
    eval_semantic,
    instance_ap,
    instance_map,
    match_instances,
    point_set_iou,
    retrieve,
    voxel_keys,
)
from panmap.semantics import EmbeddingBank, SemanticsConfig, bank_update

DIM = 8
CFG = SemanticsConfig(emb_dim=DIM)


def _unit(axis: int) -> np.ndarray:
    e = np.zeros(DIM)
    e[axis] = 1.0
    return e


@dataclass
class _Rec:
    id: int
    bank: EmbeddingBank


def _rec(rid: int, *axes: int, conf: float = 1.0) -> _Rec:
    bank = EmbeddingBank()
    for axis in axes:
        bank_update(bank, _unit(axis), conf, CFG)
    return _Rec(rid, bank)


def _cells(*coords: tuple[int, int, int], vs: float = 0.1) -> np.ndarray:
    """Points placed exactly at the centers of the given lattice cells."""
    return (np.array(coords, dtype=np.float64) + 0.5) * vs


# -- retrieval ---------------------------------------------------------------


def test_retrieve_ranks_by_best_similarity():
    records = [_rec(1, 0), _rec(2, 1), _rec(3, 0, 1)]
    got = retrieve(records, _unit(1))
    # ids 2 and 3 both score 1.0; the tie goes to the lower id first.
    assert [rid for rid, _ in got] == [2, 3, 1]
    assert got[0][1] == pytest.approx(1.0)
    assert got[1][1] == pytest.approx(1.0)
    assert got[2][1] == pytest.approx(0.0)


def test_retrieve_top_k_and_threshold():
    records = [_rec(1, 0), _rec(2, 1), _rec(3, 2)]
    q = 0.9 * _unit(0) + 0.3 * _unit(1)
    assert [rid for rid, _ in retrieve(records, q, top_k=2)] == [1, 2]
    kept = retrieve(records, q, threshold=0.25)
    assert [rid for rid, _ in kept] == [1, 2]
    assert all(s > 0.25 for _, s in kept)
    # threshold is strict: a score exactly at the cutoff is dropped.
    assert retrieve(records, _unit(0), threshold=1.0) == []
    assert [rid for rid, _ in retrieve(records, q, top_k=1, threshold=0.25)] == [1]


def test_retrieve_skips_empty_banks_and_scales_linearly():
    records = [_Rec(1, EmbeddingBank()), _rec(2, 0)]
    got = retrieve(records, _unit(0))
    assert [rid for rid, _ in got] == [2]
    # Scaling the query scales scores but never reorders anything.
    records = [_rec(1, 0), _rec(2, 1), _rec(3, 2)]
    q = 0.5 * _unit(0) + 0.2 * _unit(1) + 0.1 * _unit(2)
    base = retrieve(records, q)
    doubled = retrieve(records, 2.0 * q)
    assert [rid for rid, _ in base] == [rid for rid, _ in doubled]
    for (_, s1), (_, s2) in zip(base, doubled):
        assert s2 == pytest.approx(2.0 * s1)


# -- classification ----------------------------------------------------------


def test_classify_picks_best_label():
    records = [_rec(1, 0), _rec(2, 1), _rec(3, 1)]
    label_bank = [(10, _unit(0)), (20, _unit(1))]
    assert classify(records, label_bank) == {1: 10, 2: 20, 3: 20}


def test_classify_tie_goes_to_earlier_label():
    records = [_rec(1, 2)]  # orthogonal to both labels: similarity ties at 0
    label_bank = [(10, _unit(0)), (20, _unit(1))]
    assert classify(records, label_bank) == {1: 10}


def test_classify_exclude_and_empty():
    records = [_rec(1, 0), _Rec(2, EmbeddingBank())]
    label_bank = [(10, _unit(0)), (20, _unit(1))]
    assert classify(records, label_bank, exclude=(10,)) == {1: 20}
    with pytest.raises(ValueError):
        classify(records, label_bank, exclude=(10, 20))


# -- lattice utilities -------------------------------------------------------


def test_cell_keys_round_trip_cell_centers():
    pts = _cells((0, 0, 0), (1, 2, 3), (-4, 0, 2), (1, 2, 3))
    keys = cell_keys(pts, 0.1)
    assert keys.shape == (4,)
    assert keys[1] == keys[3]  # same cell, same key, point order preserved
    assert len(voxel_keys(pts, 0.1)) == 3
    assert len(cell_keys(np.zeros((0, 3)), 0.1)) == 0


def test_point_set_iou():
    a = _cells((0, 0, 0), (1, 0, 0))
    b = _cells((1, 0, 0), (2, 0, 0), (3, 0, 0))
    assert point_set_iou(a, b, 0.1) == pytest.approx(1.0 / 4.0)
    assert point_set_iou(a, a, 0.1) == 1.0
    assert point_set_iou(a, np.zeros((0, 3)), 0.1) == 0.0
    assert point_set_iou(np.zeros((0, 3)), b, 0.1) == 0.0


# -- average precision -------------------------------------------------------


def test_instance_ap_perfect_predictions():
    g1 = _cells((0, 0, 0), (1, 0, 0))
    g2 = _cells((50, 0, 0), (51, 0, 0))
    preds = [(g1, 0.9), (g2, 0.8)]
    assert instance_ap(preds, [g1, g2], 0.5, 0.1) == pytest.approx(1.0)


def test_instance_ap_all_wrong():
    g1 = _cells((0, 0, 0))
    junk = _cells((90, 90, 90))
    assert instance_ap([(junk, 0.9)], [g1], 0.5, 0.1) == 0.0
    assert instance_ap([], [g1], 0.5, 0.1) == 0.0


def test_instance_ap_frozen_mixed_case():
    # One confident hit, one confident miss, one hesitant hit:
    # AP = (1/2)(1/1) + (1/2)(2/3) = 5/6.
    g1 = _cells((0, 0, 0), (1, 0, 0))
    g2 = _cells((50, 0, 0), (51, 0, 0))
    far = _cells((90, 90, 90))
    preds = [(g1, 0.9), (far, 0.8), (g2, 0.7)]
    ap = instance_ap(preds, [g1, g2], 0.5, 0.1)
    assert ap == pytest.approx(0.8333333333333333, abs=1e-12)


def test_instance_ap_invariant_to_monotone_score_transforms():
    g1 = _cells((0, 0, 0), (1, 0, 0))
    g2 = _cells((50, 0, 0), (51, 0, 0))
    far = _cells((90, 90, 90))
    preds = [(g1, 0.9), (far, 0.8), (g2, 0.7)]
    base = instance_ap(preds, [g1, g2], 0.5, 0.1)
    for f in (lambda s: 2 * s + 1, math.exp, lambda s: s**3):
        warped = [(pts, f(s)) for pts, s in preds]
        assert instance_ap(warped, [g1, g2], 0.5, 0.1) == base


def test_instance_ap_claims_each_gt_once():
    g1 = _cells((0, 0, 0), (1, 0, 0))
    # Two identical predictions of the same object: the second one finds the
    # instance already claimed and counts as a false positive.
    preds = [(g1, 0.9), (g1, 0.8)]
    assert instance_ap(preds, [g1], 0.5, 0.1) == pytest.approx(1.0)
    g2 = _cells((50, 0, 0))
    assert instance_ap(preds, [g1, g2], 0.5, 0.1) == pytest.approx(0.5)


def test_instance_ap_validation():
    with pytest.raises(ValueError):
        instance_ap([], [], 0.5, 0.1)
    with pytest.raises(ValueError):
        instance_ap([], [np.zeros((0, 3))], 0.5, 0.1)


def test_instance_map_partitions_by_class():
    g1 = _cells((0, 0, 0), (1, 0, 0))
    g2 = _cells((50, 0, 0), (51, 0, 0))
    gts = [(g1, 1), (g2, 2)]
    preds = [
        (g1, 0.9, 1),  # perfect for class 1
        (_cells((90, 90, 90)), 0.9, 3),  # class absent from GT: ignored
    ]
    assert instance_map(preds, gts, 0.5, 0.1) == pytest.approx(0.5)
    preds.append((g2, 0.8, 2))
    assert instance_map(preds, gts, 0.5, 0.1) == pytest.approx(1.0)


# -- semantic scores ---------------------------------------------------------


def test_eval_semantic_identical_arrays():
    labels = np.array([1, 1, 2, 3, 3, 3])
    scores = eval_semantic(labels, labels)
    assert scores.miou == 1.0
    assert scores.macc == 1.0
    assert scores.fw_iou == 1.0
    assert scores.fw_acc == 1.0
    assert scores.per_class_iou == {1: 1.0, 2: 1.0, 3: 1.0}


def test_eval_semantic_disjoint_arrays():
    pred = np.array([1, 1, 1])
    gt = np.array([2, 2, 2])
    scores = eval_semantic(pred, gt)
    assert scores.miou == 0.0
    assert scores.macc == 0.0
    assert scores.per_class_iou == {1: 0.0, 2: 0.0}


def test_eval_semantic_hand_computed_confusion():
    pred = np.array([1, 1, 2, 2, 0])
    gt = np.array([1, 2, 2, 2, 1])
    scores = eval_semantic(pred, gt)
    assert scores.per_class_iou == {1: pytest.approx(1 / 3), 2: pytest.approx(2 / 3)}
    assert scores.miou == pytest.approx((1 / 3 + 2 / 3) / 2)
    assert scores.macc == pytest.approx((1 / 2 + 2 / 3) / 2)
    assert scores.fw_iou == pytest.approx((2 * (1 / 3) + 3 * (2 / 3)) / 5)
    assert scores.fw_acc == pytest.approx((2 * (1 / 2) + 3 * (2 / 3)) / 5)


def test_eval_semantic_prediction_only_class_hurts_miou_not_macc():
    pred = np.array([1, 3])
    gt = np.array([1, 1])
    scores = eval_semantic(pred, gt)
    assert scores.per_class_iou == {1: 0.5, 3: 0.0}
    assert scores.miou == pytest.approx(0.25)
    assert scores.macc == pytest.approx(0.5)  # class 3 has no GT support


def test_eval_semantic_ignore_set():
    pred = np.array([0, 1, 1])
    gt = np.array([1, 1, 0])
    scores = eval_semantic(pred, gt)  # background 0 ignored but absorbs errors
    assert scores.per_class_iou == {1: pytest.approx(1 / 3)}
    with pytest.raises(ValueError):
        eval_semantic(np.array([0, 0]), np.array([0, 0]))
    with pytest.raises(ValueError):
        eval_semantic(np.array([1]), np.array([1, 2]))
    with pytest.raises(ValueError):
        eval_semantic(np.array([]), np.array([]))


# -- instance matching -------------------------------------------------------


def test_match_instances_prefers_highest_iou():
    pred0 = _cells((0, 0, 0), (1, 0, 0))  # half overlap with gt0
    pred1 = _cells((1, 0, 0))  # full overlap with gt0
    gt0 = _cells((1, 0, 0))
    assert match_instances([pred0, pred1], [gt0], 0.1) == {1: 0}


def test_match_instances_one_to_one_and_zero_overlap():
    pred0 = _cells((0, 0, 0))
    pred1 = _cells((5, 0, 0))
    gt0 = _cells((0, 0, 0))
    gt1 = _cells((90, 0, 0))  # overlaps nothing
    got = match_instances([pred0, pred1], [gt0, gt1], 0.1)
    assert got == {0: 0}


def test_match_instances_tie_breaks_by_index():
    same = _cells((0, 0, 0))
    got = match_instances([same, same], [same, same], 0.1)
    assert got == {0: 0, 1: 1}
