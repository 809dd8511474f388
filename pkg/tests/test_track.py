"""Tests for track association, fusion and lifecycle."""

from __future__ import annotations

import math

import numpy as np
import pytest

from panmap.detect import Detection
from panmap.geometry import (
    Frustum,
    Intrinsics,
    Obb,
    ObbStats,
    Pose,
    fit_obb,
    obb_to_aabb,
)
from panmap.semantics import SemanticsConfig
from panmap.track import (
    Association,
    Tracker,
    TrackerConfig,
    load_tracks,
    match_cost,
    save_tracks,
)
from panmap.tsdf import VoxelGrid

DIM = 8


def _emb(axis: int) -> np.ndarray:
    e = np.zeros(DIM)
    e[axis] = 1.0
    return e


def _det(
    center,
    extents=(0.4, 0.4, 0.4),
    emb_axis: int = 0,
    conf: float = 0.9,
) -> Detection:
    obb = Obb(np.asarray(center, dtype=np.float64), np.eye(3), np.asarray(extents, float))
    stats = ObbStats.from_points(obb.corners())
    return Detection(
        obb=obb, stats=stats, embedding=_emb(emb_axis), confidence=conf, point_count=8
    )


def _tracker(**cfg_kwargs) -> Tracker:
    return Tracker(TrackerConfig(**cfg_kwargs), SemanticsConfig(emb_dim=DIM))


def _wide_frustum() -> Frustum:
    intr = Intrinsics(fx=100.0, fy=100.0, cx=99.5, cy=99.5, width=200, height=200)
    return Frustum.from_camera(Pose.identity(), intr, near=0.01, far=100.0)


# -- match cost --------------------------------------------------------------


def test_match_cost_zero_for_identical_pair():
    tracker = _tracker()
    det = _det((0, 0, 1))
    tid = tracker.spawn(det, frame=0)
    assert match_cost(tracker.tracks[tid], det, tracker.cfg) == pytest.approx(0.0, abs=1e-12)


def test_match_cost_volume_term_only():
    tracker = _tracker()
    tid = tracker.spawn(_det((0, 0, 1)), frame=0)
    far = _det((3, 0, 1))  # disjoint boxes, same embedding
    cost = match_cost(tracker.tracks[tid], far, tracker.cfg)
    assert cost == pytest.approx(1.0)  # w_volume * (1 - 0)


def test_match_cost_semantic_term_only():
    tracker = _tracker()
    tid = tracker.spawn(_det((0, 0, 1), emb_axis=0), frame=0)
    other = _det((0, 0, 1), emb_axis=1)  # same box, orthogonal embedding
    cost = match_cost(tracker.tracks[tid], other, tracker.cfg)
    assert cost == pytest.approx(0.5 * math.sqrt(2.0))


def test_match_cost_gate_cuts_off_bad_pairs():
    tracker = _tracker()
    tid = tracker.spawn(_det((0, 0, 1), emb_axis=0), frame=0)
    # Disjoint box and orthogonal embedding: 1.0 + 0.5*sqrt(2) > default gate.
    awful = _det((3, 0, 1), emb_axis=1)
    assert match_cost(tracker.tracks[tid], awful, tracker.cfg) == np.inf
    # With an explicit looser gate the same pair gets its raw cost.
    loose = _tracker(match_cost_max=10.0)
    tid2 = loose.spawn(_det((0, 0, 1), emb_axis=0), frame=0)
    cost = match_cost(loose.tracks[tid2], awful, loose.cfg)
    assert cost == pytest.approx(1.0 + 0.5 * math.sqrt(2.0))


def test_default_gate_value():
    assert TrackerConfig().gate == pytest.approx(0.9 * (1.0 + 0.5 * math.sqrt(2.0)))


# -- association -------------------------------------------------------------


def test_associate_no_tracks():
    tracker = _tracker()
    assoc = tracker.associate([_det((0, 0, 1))])
    assert assoc == Association([], [0], [])


def test_associate_no_detections():
    tracker = _tracker()
    tracker.spawn(_det((0, 0, 1)), frame=0)
    assert tracker.associate([]) == Association([], [], [])


def test_associate_matches_nearby_and_reports_leftovers():
    tracker = _tracker()
    t1 = tracker.spawn(_det((0, 0, 1)), frame=0)
    t2 = tracker.spawn(_det((2, 0, 1)), frame=0)
    tracker.spawn(_det((50, 0, 1)), frame=0)  # far away: never a candidate
    dets = [
        _det((0.05, 0, 1)),  # overlaps t1
        _det((10, 10, 1)),  # overlaps nothing
    ]
    assoc = tracker.associate(dets)
    assert assoc.matches == [(t1, 0)]
    assert assoc.unmatched_detections == [1]
    # t2 was surfaced by the index for neither detection, so it is absent;
    # only candidate tracks that lost the assignment are reported.
    assert t2 not in dict(assoc.matches)
    assert assoc.unmatched_tracks == []


def test_associate_prefers_global_optimum():
    # Pairwise-greedy would give track 1 the first detection (cost 0 for it
    # too), starving track 2; the joint assignment must pick the diagonal.
    tracker = _tracker()
    t1 = tracker.spawn(_det((0, 0, 1), emb_axis=0), frame=0)
    t2 = tracker.spawn(_det((0.2, 0, 1), emb_axis=1), frame=0)
    d_for_t1 = _det((0, 0, 1), emb_axis=0)
    d_for_t2 = _det((0.2, 0, 1), emb_axis=1)
    assoc = tracker.associate([d_for_t2, d_for_t1])
    assert sorted(assoc.matches) == [(t1, 1), (t2, 0)]
    assert assoc.unmatched_detections == []
    assert assoc.unmatched_tracks == []


def test_associate_respects_gate():
    tracker = _tracker()
    tracker.spawn(_det((0, 0, 1), emb_axis=0), frame=0)
    # Close enough for the index (with margin) but orthogonal embedding and
    # low overlap: gated out, so the detection stays unmatched.
    det = _det((0.45, 0, 1), emb_axis=1)
    assoc = tracker.associate([det])
    assert assoc.matches == []
    assert assoc.unmatched_detections == [0]
    assert assoc.unmatched_tracks == [1]


# -- fusion ------------------------------------------------------------------


def test_update_with_identical_detection_is_fixed_point():
    tracker = _tracker()
    det = _det((1, 2, 3), extents=(0.5, 0.4, 0.3))
    tid = tracker.spawn(det, frame=0)
    for frame in range(1, 51):
        tracker.update_track(tid, det, frame)
    tr = tracker.tracks[tid]
    assert np.allclose(tr.obb.center, (1, 2, 3), atol=1e-9)
    assert np.allclose(tr.obb.extents, (0.5, 0.4, 0.3), atol=1e-9)
    assert tr.stats.count == 8 * 51
    assert tr.last_seen == 50
    assert tr.miss_count == 0


def test_update_never_shrinks_the_box():
    rng = np.random.default_rng(4)
    tracker = _tracker()
    tid = tracker.spawn(_det((0, 0, 1)), frame=0)
    prev = tracker.tracks[tid].obb.extents.copy()
    for frame in range(1, 30):
        center = np.array([0, 0, 1]) + rng.uniform(-0.1, 0.1, size=3)
        ext = rng.uniform(0.2, 0.6, size=3)
        tracker.update_track(tid, _det(center, extents=tuple(ext)), frame)
        now = tracker.tracks[tid].obb.extents
        assert np.all(now >= prev - 1e-12)
        prev = now.copy()


def test_update_grows_to_cover_both_boxes():
    tracker = _tracker()
    tid = tracker.spawn(_det((0, 0, 1), extents=(0.4, 0.4, 0.4)), frame=0)
    tracker.update_track(tid, _det((0.3, 0, 1), extents=(0.4, 0.4, 0.4)), frame=1)
    tr = tracker.tracks[tid]
    assert np.allclose(tr.obb.center, (0.15, 0, 1), atol=1e-9)
    assert np.allclose(tr.obb.extents, (0.7, 0.4, 0.4), atol=1e-9)


def test_partial_views_recover_full_extent():
    # Two half-views of one box, each clipped past the middle so they overlap:
    # the fused track should approximate the full object's box even though no
    # single detection saw all of it.
    rng = np.random.default_rng(1)
    half = np.array([0.8, 0.3, 0.15])
    pts = rng.uniform(-half, half, size=(3000, 3))
    left = pts[pts[:, 0] <= 0.25]
    right = pts[pts[:, 0] >= -0.25]

    def _to_det(cloud: np.ndarray) -> Detection:
        obb, stats = fit_obb(cloud)
        return Detection(obb=obb, stats=stats, embedding=_emb(0),
                         confidence=0.9, point_count=len(cloud))

    tracker = _tracker()
    tid = tracker.spawn(_to_det(left), frame=0)
    tracker.update_track(tid, _to_det(right), frame=1)
    fused = tracker.tracks[tid].obb
    rel = np.abs(np.sort(fused.extents) - np.sort(2 * half)) / np.sort(2 * half)
    assert np.max(rel) <= 0.10


def test_sequential_stats_match_batch():
    rng = np.random.default_rng(9)
    clouds = [rng.normal(size=(40, 3)) * 0.2 + [0, 0, 1] for _ in range(10)]
    tracker = _tracker()

    def _to_det(cloud: np.ndarray) -> Detection:
        obb, stats = fit_obb(cloud)
        return Detection(obb=obb, stats=stats, embedding=_emb(0),
                         confidence=0.9, point_count=len(cloud))

    tid = tracker.spawn(_to_det(clouds[0]), frame=0)
    for k, cloud in enumerate(clouds[1:], start=1):
        tracker.update_track(tid, _to_det(cloud), frame=k)
    batch = ObbStats.from_points(np.vstack(clouds))
    got = tracker.tracks[tid].stats
    assert got.count == batch.count
    assert np.allclose(got.centroid, batch.centroid, atol=1e-9)
    scale = max(1.0, float(np.abs(batch.scatter).max()))
    assert np.max(np.abs(got.scatter - batch.scatter)) / scale < 1e-6


# -- lifecycle ---------------------------------------------------------------


def test_track_retires_after_miss_limit():
    tracker = _tracker(miss_limit=3, support_min=0.0)
    tid = tracker.spawn(_det((0, 0, 1)), frame=0)
    frustum = _wide_frustum()
    grid = VoxelGrid()
    assert tracker.end_frame(frustum, grid, matched_ids=set()) == []
    assert tracker.end_frame(frustum, grid, matched_ids=set()) == []
    assert tracker.end_frame(frustum, grid, matched_ids=set()) == [tid]
    assert len(tracker) == 0
    assert tracker.total_pruned == 1


def test_matched_track_never_misses():
    tracker = _tracker(miss_limit=2, support_min=0.0)
    tid = tracker.spawn(_det((0, 0, 1)), frame=0)
    frustum = _wide_frustum()
    grid = VoxelGrid()
    for _ in range(10):
        assert tracker.end_frame(frustum, grid, matched_ids={tid}) == []
    assert tracker.tracks[tid].miss_count == 0


def test_out_of_view_track_is_not_judged():
    tracker = _tracker(miss_limit=1, support_min=0.0)
    tid = tracker.spawn(_det((0, 0, -5)), frame=0)  # behind the camera
    frustum = _wide_frustum()
    for _ in range(5):
        assert tracker.end_frame(frustum, VoxelGrid(), matched_ids=set()) == []
    assert tracker.tracks[tid].miss_count == 0


def test_unsupported_track_retires_even_when_matched():
    # The map never grew any voxels for this track, so support stays at zero
    # and the support streak retires it despite perfect detection matches.
    tracker = _tracker(miss_limit=3, support_min=0.5)
    tid = tracker.spawn(_det((0, 0, 1)), frame=0)
    frustum = _wide_frustum()
    grid = VoxelGrid()
    assert tracker.end_frame(frustum, grid, matched_ids={tid}) == []
    assert tracker.end_frame(frustum, grid, matched_ids={tid}) == []
    assert tracker.end_frame(frustum, grid, matched_ids={tid}) == [tid]


def test_high_confidence_track_survives_misses():
    tracker = _tracker(miss_limit=2, support_min=0.0, confidence_keep=0.9)
    det = _det((0, 0, 1), conf=0.95)
    tid = tracker.spawn(det, frame=0)
    # Accumulate semantic confidence past keep: c/(c+1) > 0.9 needs c > 9.
    for _ in range(12):
        tracker.refresh_bank(tid, det)
    frustum = _wide_frustum()
    for _ in range(10):
        assert tracker.end_frame(frustum, VoxelGrid(), matched_ids=set()) == []
    assert len(tracker) == 1


def test_index_stays_consistent_with_tracks():
    rng = np.random.default_rng(13)
    tracker = _tracker(miss_limit=2, support_min=0.0)
    frustum = _wide_frustum()
    grid = VoxelGrid()
    live: list[int] = []
    for frame in range(30):
        if rng.random() < 0.6:
            c = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 4)])
            live.append(tracker.spawn(_det(c), frame))
        if live and rng.random() < 0.5:
            tid = live[rng.integers(len(live))]
            if tid in tracker.tracks:
                c = tracker.tracks[tid].obb.center + rng.uniform(-0.05, 0.05, 3)
                tracker.update_track(tid, _det(c), frame)
        matched = {t for t in live if t in tracker.tracks and rng.random() < 0.5}
        tracker.end_frame(frustum, grid, matched)
        assert sorted(tracker._index.keys()) == sorted(tracker.tracks)
        for tid, tr in tracker.tracks.items():
            want = obb_to_aabb(tr.obb)
            got = tracker._index.aabb_of(tid)
            assert np.allclose(got.min, want.min) and np.allclose(got.max, want.max)
    assert tracker.total_spawned == len(live)
    assert tracker.total_spawned - tracker.total_pruned == len(tracker)


def test_tracker_is_deterministic():
    def _run() -> list[tuple[int, tuple, tuple]]:
        rng = np.random.default_rng(21)
        tracker = _tracker(miss_limit=3, support_min=0.0)
        frustum = _wide_frustum()
        grid = VoxelGrid()
        for frame in range(20):
            dets = [
                _det(np.array([0, 0, 1.5]) + rng.uniform(-0.05, 0.05, 3)),
                _det(np.array([1.2, 0, 1.5]) + rng.uniform(-0.05, 0.05, 3), emb_axis=1),
            ]
            assoc = tracker.associate(dets)
            for tid, d in assoc.matches:
                tracker.update_track(tid, dets[d], frame)
            for d in assoc.unmatched_detections:
                tracker.spawn(dets[d], frame)
            tracker.end_frame(frustum, grid, {tid for tid, _ in assoc.matches})
        return [
            (tid, tuple(tr.obb.center), tuple(tr.obb.extents))
            for tid, tr in sorted(tracker.tracks.items())
        ]

    assert _run() == _run()


# -- persistence -------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    tracker = _tracker()
    t1 = tracker.spawn(_det((0, 0, 1), emb_axis=0), frame=0)
    t2 = tracker.spawn(_det((2, 0, 1), emb_axis=1, conf=0.7), frame=0)
    tracker.update_track(t1, _det((0.1, 0, 1), emb_axis=2), frame=1)

    text, emb = tmp_path / "tracks.txt", tmp_path / "tracks.emb"
    save_tracks(tracker.tracks, text, emb)
    records = load_tracks(text, emb)
    assert [r.id for r in records] == [t1, t2]
    for rec in records:
        tr = tracker.tracks[rec.id]
        assert np.array_equal(rec.obb.center, tr.obb.center)  # repr round-trips
        assert np.array_equal(rec.obb.extents, tr.obb.extents)
        assert np.array_equal(rec.obb.rotation, tr.obb.rotation)
        assert rec.stats.count == tr.stats.count
        assert np.array_equal(rec.stats.centroid, tr.stats.centroid)
        assert len(rec.bank) == len(tr.bank)
        for got, want in zip(rec.bank.entries, tr.bank.entries):
            assert got.confidence == want.confidence
            assert np.allclose(got.embedding, want.embedding, atol=1e-6)
            assert abs(np.linalg.norm(got.embedding) - 1.0) < 1e-9


def test_save_load_empty_tracker(tmp_path):
    text, emb = tmp_path / "tracks.txt", tmp_path / "tracks.emb"
    save_tracks({}, text, emb)
    assert load_tracks(text, emb) == []


def test_load_rejects_bad_header(tmp_path):
    text, emb = tmp_path / "tracks.txt", tmp_path / "tracks.emb"
    save_tracks({}, text, emb)
    text.write_text("bogus 9\ncount 0\n")
    with pytest.raises(ValueError):
        load_tracks(text, emb)


def test_tracker_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(w_volume=-1.0)
    with pytest.raises(ValueError):
        TrackerConfig(miss_limit=0)
    with pytest.raises(ValueError):
        TrackerConfig(support_min=1.5)
