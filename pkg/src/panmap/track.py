"""Object track lifecycle: association, fusion, and pruning.

A track owns a fused oriented box, the running point statistics behind it,
and a semantic embedding bank. New detections are matched to live tracks by
a gated assignment over box overlap and embedding distance; matched tracks
fuse geometry incrementally, unmatched detections spawn, and tracks that the
map stops supporting (or that keep missing while in view) are retired unless
their semantic confidence has grown too strong to discard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .assignment import hungarian
from .detect import Detection
from .geometry import (
    Frustum,
    Obb,
    ObbStats,
    merge_stats,
    obb_iou,
    obb_to_aabb,
)
from .rtree import AabbIndex
from .semantics import (
    EmbeddingBank,
    SemanticsConfig,
    bank_confidence,
    bank_update,
)
from .tsdf import VoxelGrid

# Largest possible distance between two unit embeddings; used as the semantic
# cost against a track whose bank is still empty.
_MAX_EMB_DIST = 2.0



@dataclass(frozen=True)
class TrackerConfig:
    w_volume: float = 1.0
    w_semantic: float = 0.5
    # None picks the default gate: 90% of the worst plausible cost of a pair
    # that still overlaps (IoU -> 0, embedding distance -> sqrt(2) for
    # orthogonal unit vectors).
    match_cost_max: float | None = None
    miss_limit: int = 5
    query_margin: float = 0.1
    support_min: float = 0.2
    confidence_keep: float = 0.9
    iou_resolution: int = 24

    def __post_init__(self):
        if self.w_volume < 0 or self.w_semantic < 0:
            raise ValueError("cost weights must be non-negative")
        if self.miss_limit < 1:
            raise ValueError("miss_limit must be >= 1")
        if not (0.0 <= self.support_min <= 1.0):
            raise ValueError("support_min must lie in [0, 1]")

    @property
    def gate(self) -> float:
        if self.match_cost_max is not None:
            return self.match_cost_max
        return 0.9 * (self.w_volume + self.w_semantic * math.sqrt(2.0))


@dataclass
class Track:
    id: int
    obb: Obb
    stats: ObbStats
    bank: EmbeddingBank
    created_at: int
    last_seen: int
    miss_count: int = 0
    support_misses: int = 0


@dataclass(frozen=True)
class Association:
    """Outcome of matching one frame's detections against live tracks."""

    matches: list[tuple[int, int]]  # (track id, detection index)
    unmatched_detections: list[int]
    unmatched_tracks: list[int]  # candidate tracks that found no detection


def embedding_distance(bank: EmbeddingBank, embedding: np.ndarray) -> float:
    """Smallest Euclidean distance from an observed embedding to a bank."""
    if not bank.entries:
        return _MAX_EMB_DIST
    e = np.asarray(embedding, dtype=np.float64)
    return min(float(np.linalg.norm(entry.embedding - e)) for entry in bank.entries)


def match_cost(track: Track, det: Detection, cfg: TrackerConfig) -> float:
    """Gated association cost; np.inf when the pair is not allowed to match."""
    iou = obb_iou(track.obb, det.obb, resolution=cfg.iou_resolution)
    cost = cfg.w_volume * (1.0 - iou) + cfg.w_semantic * embedding_distance(track.bank, det.embedding)
    return cost if cost <= cfg.gate else np.inf


class Tracker:
    """Owns all live tracks and their spatial index."""

    def __init__(self, cfg: TrackerConfig | None = None, sem_cfg: SemanticsConfig | None = None):
        self.cfg = cfg or TrackerConfig()
        self.sem_cfg = sem_cfg or SemanticsConfig()
        self.tracks: dict[int, Track] = {}
        self._index = AabbIndex()
        self._next_id = 1
        self.total_spawned = 0
        self.total_pruned = 0

    def __len__(self) -> int:
        return len(self.tracks)

    def candidates(self, det: Detection) -> list[int]:
        """Track ids whose boxes lie near a detection (index query + margin)."""
        return self._index.query(obb_to_aabb(det.obb), margin=self.cfg.query_margin)

    def associate(self, detections: list[Detection]) -> Association:
        """Assign detections to nearby tracks with a gated optimal matching.

        Only tracks surfaced by the spatial index form rows of the cost
        matrix; everything else can never match this frame, which keeps the
        assignment tiny regardless of map size.
        """
        if not detections or not self.tracks:
            return Association([], list(range(len(detections))), [])
        cand: set[int] = set()
        for det in detections:
            cand.update(self.candidates(det))
        rows = sorted(cand)
        if not rows:
            return Association([], list(range(len(detections))), [])
        cost = np.full((len(rows), len(detections)), np.inf)
        for r, tid in enumerate(rows):
            for c, det in enumerate(detections):
                cost[r, c] = match_cost(self.tracks[tid], det, self.cfg)
        pairs = hungarian(cost)
        matches = [(rows[r], c) for r, c in pairs]
        matched_rows = {r for r, _ in pairs}
        matched_cols = {c for _, c in pairs}
        return Association(
            matches=matches,
            unmatched_detections=[c for c in range(len(detections)) if c not in matched_cols],
            unmatched_tracks=[rows[r] for r in range(len(rows)) if r not in matched_rows],
        )

    def spawn(self, det: Detection, frame: int) -> int:
        tid = self._next_id
        self._next_id += 1
        bank = EmbeddingBank()
        bank_update(bank, det.embedding, det.confidence, self.sem_cfg)
        self.tracks[tid] = Track(
            id=tid,
            obb=det.obb,
            stats=det.stats,
            bank=bank,
            created_at=frame,
            last_seen=frame,
        )
        self._index.insert(tid, obb_to_aabb(det.obb))
        self.total_spawned += 1
        return tid

    def update_track(self, tid: int, det: Detection, frame: int, update_bank: bool = True) -> None:
        """Fuse a matched detection into a track.

        Geometry: point statistics merge in closed form, and the box span is
        the union of the previous span and the detection's corner projections
        (the original points are gone, so the boxes stand in for them). The
        box keeps the axes fixed at spawn: projecting corners onto a rotated
        frame can only widen a box, so re-deriving axes from the drifting
        fused covariance every update would inflate the box without bound,
        while in a fixed frame the span converges to the tight axis-aligned
        hull of everything observed.
        """
        tr = self.tracks[tid]
        stats = merge_stats(tr.stats, det.stats)
        axes = tr.obb.rotation
        corners = np.vstack([tr.obb.corners(), det.obb.corners()])
        proj = corners @ axes
        lo, hi = proj.min(axis=0), proj.max(axis=0)
        tr.obb = Obb(axes @ ((lo + hi) / 2.0), axes, hi - lo)
        tr.stats = stats
        if update_bank:
            bank_update(tr.bank, det.embedding, det.confidence, self.sem_cfg)
        tr.miss_count = 0
        tr.last_seen = frame
        self._index.update(tid, obb_to_aabb(tr.obb))

    def refresh_bank(self, tid: int, det: Detection) -> None:
        bank_update(self.tracks[tid].bank, det.embedding, det.confidence, self.sem_cfg)

    def end_frame(self, frustum: Frustum, grid: VoxelGrid, matched_ids: set[int]) -> list[int]:
        """Close out a frame: count misses, check map support, retire tracks.

        Only tracks whose box center lies inside the camera frustum are
        judged; an object behind the camera cannot rack up misses. A track is
        retired once either its consecutive miss count or its consecutive
        unsupported count reaches the limit, unless its accumulated semantic
        confidence has passed the keep threshold.
        """
        removed = []
        for tid in sorted(self.tracks):
            tr = self.tracks[tid]
            if not frustum.contains(tr.obb.center):
                continue
            if tid not in matched_ids:
                tr.miss_count += 1
            if grid.support_ratio(tr.obb, tid) >= self.cfg.support_min:
                tr.support_misses = 0
            else:
                tr.support_misses += 1
            over = tr.miss_count >= self.cfg.miss_limit or tr.support_misses >= self.cfg.miss_limit
            if over and not bank_confidence(tr.bank) > self.cfg.confidence_keep:
                removed.append(tid)
        for tid in removed:
            del self.tracks[tid]
            self._index.remove(tid)
        self.total_pruned += len(removed)
        return removed


@dataclass(frozen=True)
class TrackRecord:
    """What survives a save/load round trip; enough for querying and resuming."""

    id: int
    obb: Obb
    stats: ObbStats
    bank: EmbeddingBank


def save_tracks(tracks: dict[int, Track], text_path, emb_path) -> None:
    """Write tracks as readable text plus a binary embedding sidecar.

    Floats are written with repr() so the text round-trips exactly; bank
    embeddings live in the sidecar and are referenced by row.
    """
    from .semantics import write_embeddings

    rows: list[np.ndarray] = []
    lines = ["tracks 1", f"count {len(tracks)}"]
    for tid in sorted(tracks):
        tr = tracks[tid]
        lines.append(f"track {tid}")
        lines.append("center " + " ".join(repr(float(x)) for x in tr.obb.center))
        lines.append("rotation " + " ".join(repr(float(x)) for x in tr.obb.rotation.reshape(-1)))
        lines.append("extents " + " ".join(repr(float(x)) for x in tr.obb.extents))
        stats_vals = [float(x) for x in (*tr.stats.centroid, *tr.stats.scatter.reshape(-1))]
        lines.append(f"stats {tr.stats.count} " + " ".join(repr(x) for x in stats_vals))
        bank_parts = [str(len(tr.bank.entries))]
        for entry in tr.bank.entries:
            bank_parts += [repr(float(entry.confidence)), str(len(rows))]
            rows.append(entry.embedding)
        lines.append("bank " + " ".join(bank_parts))
    dim = rows[0].shape[0] if rows else 1
    write_embeddings(emb_path, np.asarray(rows).reshape(len(rows), dim))
    with open(text_path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_tracks(text_path, emb_path) -> list[TrackRecord]:
    from .semantics import BankEntry, read_embeddings

    vectors = read_embeddings(emb_path)
    with open(text_path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != "tracks 1":
        raise ValueError("unrecognized tracks file header")
    records = []
    i = 2  # skip header and count
    while i < len(lines):
        if not lines[i].startswith("track "):
            raise ValueError(f"expected a track stanza at line {i + 1}")
        tid = int(lines[i].split()[1])
        center = np.array([float(x) for x in lines[i + 1].split()[1:]])
        rotation = np.array([float(x) for x in lines[i + 2].split()[1:]]).reshape(3, 3)
        extents = np.array([float(x) for x in lines[i + 3].split()[1:]])
        sv = lines[i + 4].split()[1:]
        stats = ObbStats(
            int(sv[0]),
            np.array([float(x) for x in sv[1:4]]),
            np.array([float(x) for x in sv[4:13]]).reshape(3, 3),
        )
        bv = lines[i + 5].split()[1:]
        bank = EmbeddingBank()
        for b in range(int(bv[0])):
            conf = float(bv[1 + 2 * b])
            row = int(bv[2 + 2 * b])
            e = vectors[row]
            e = e / np.linalg.norm(e)  # re-unit after float32 storage
            bank.entries.append(BankEntry(e, conf))
        records.append(TrackRecord(tid, Obb(center, rotation, extents), stats, bank))
        i += 6
    return records
