"""Per-frame 3D object detection from 2D instance masks and depth.

Each confident 2D mask is lifted into a world-frame point cloud through the
depth image, cleaned up with density clustering (depth bleeding at object
silhouettes produces stray points that must not stretch the box), and the
largest surviving clusters become oriented-box detections carrying the mask's
embedding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import (
    DegenerateClusterError,
    Intrinsics,
    Obb,
    ObbStats,
    Pose,
    fit_obb,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectConfig:
    eps: float = 0.05
    min_pts: int = 10
    min_cluster_points: int = 50
    mask_conf_min: float = 0.5
    pixel_stride: int = 2

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.min_pts < 1 or self.min_cluster_points < 3:
            raise ValueError("cluster size thresholds too small")
        if self.pixel_stride < 1:
            raise ValueError("pixel_stride must be >= 1")


@dataclass(frozen=True)
class InstanceMask:
    """One 2D segmentation result: bitmap, confidence, unit embedding."""

    bitmap: np.ndarray
    confidence: float
    embedding: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bitmap", np.asarray(self.bitmap, dtype=bool))
        object.__setattr__(self, "embedding", np.asarray(self.embedding, dtype=np.float64))
        if self.bitmap.ndim != 2:
            raise ValueError("mask bitmap must be 2D")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError("mask confidence must lie in [0, 1]")


@dataclass(frozen=True)
class Detection:
    """A 3D detection: oriented box plus the evidence it was built from."""

    obb: Obb
    stats: ObbStats
    embedding: np.ndarray
    confidence: float
    point_count: int


@dataclass
class DetectSummary:
    """Counters for one frame, for reporting."""

    masks_in: int = 0
    masks_skipped_conf: int = 0
    masks_skipped_empty: int = 0
    clusters_small: int = 0
    clusters_degenerate: int = 0
    detections: int = 0


def lift_mask(
    mask: np.ndarray,
    depth: np.ndarray,
    intr: Intrinsics,
    pose: Pose,
    stride: int = 1,
) -> np.ndarray:
    """Back-project a mask's pixels with valid depth into world points (n, 3).

    Pixels are subsampled on a stride x stride lattice; depth must be
    positive and finite to contribute.
    """
    m = np.asarray(mask, dtype=bool)
    depth = np.asarray(depth, dtype=np.float64)
    if m.shape != depth.shape or m.shape != (intr.height, intr.width):
        raise ValueError("mask/depth/intrinsics shapes disagree")
    sub = np.zeros_like(m)
    sub[::stride, ::stride] = m[::stride, ::stride]
    sub &= np.isfinite(depth) & (depth > 0)
    v, u = np.nonzero(sub)
    if len(v) == 0:
        return np.empty((0, 3))
    z = depth[v, u]
    p_cam = np.stack(
        [(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z], axis=1
    )
    return pose.apply(p_cam)


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> tuple[list[list[int]], list[int]]:
    """Density clustering; returns (clusters, noise) as index lists.

    Matches the classic seed-expansion algorithm exactly, including its
    ordering behaviour: clusters come out ordered by their lowest-index core
    point, and a border point in range of several clusters joins the one
    whose scan would have reached it first (the earliest-formed one among its
    core neighbours). Neighbourhoods are closed balls (distance <= eps) and
    include the point itself, so a point with min_pts - 1 neighbours is core.

    The pair search uses a k-d tree instead of the textbook O(n^2) scan; the
    result is identical, only faster.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        return [], []
    pairs = cKDTree(pts).query_pairs(eps, output_type="ndarray")
    counts = np.ones(n, dtype=np.int64)  # each point neighbours itself
    if len(pairs):
        np.add.at(counts, pairs[:, 0], 1)
        np.add.at(counts, pairs[:, 1], 1)
    core = counts >= min_pts

    # Connected components over the core-core graph.
    if len(pairs):
        cc_mask = core[pairs[:, 0]] & core[pairs[:, 1]]
        cc = pairs[cc_mask]
    else:
        cc = np.empty((0, 2), dtype=np.int64)
    core_idx = np.nonzero(core)[0]
    comp_of = np.full(n, -1, dtype=np.int64)
    if len(core_idx):
        remap = np.full(n, -1, dtype=np.int64)
        remap[core_idx] = np.arange(len(core_idx))
        graph = coo_matrix(
            (np.ones(len(cc)), (remap[cc[:, 0]], remap[cc[:, 1]])),
            shape=(len(core_idx), len(core_idx)),
        )
        _, labels = connected_components(graph, directed=False)
        comp_of[core_idx] = labels

    # Order components by their smallest core index: that is the order the
    # classic scan discovers them in.
    n_comp = int(comp_of.max()) + 1 if len(core_idx) else 0
    first_core = np.full(n_comp, n, dtype=np.int64)
    np.minimum.at(first_core, comp_of[core_idx], core_idx)
    rank = np.empty(n_comp, dtype=np.int64)
    rank[np.argsort(first_core)] = np.arange(n_comp)

    # A border point joins the earliest-ranked component among its core
    # neighbours.
    best = np.full(n, n_comp, dtype=np.int64)
    if len(core_idx):
        best[core_idx] = rank[comp_of[core_idx]]
        for a, b in ((0, 1), (1, 0)):
            if len(pairs):
                m = core[pairs[:, a]] & ~core[pairs[:, b]]
                np.minimum.at(best, pairs[m, b], rank[comp_of[pairs[m, a]]])

    clusters = [[] for _ in range(n_comp)]
    noise = []
    for i in range(n):
        if best[i] < n_comp:
            clusters[best[i]].append(i)
        else:
            noise.append(i)
    return clusters, noise


def detect_frame(
    masks: list[InstanceMask],
    depth: np.ndarray,
    intr: Intrinsics,
    pose: Pose,
    cfg: DetectConfig | None = None,
) -> tuple[list[Detection], DetectSummary]:
    """Turn one frame's masks into oriented-box detections.

    Every mask is lifted and clustered independently; each cluster with at
    least min_cluster_points becomes a detection that shares the mask's
    embedding and confidence, so an over-merged mask can still produce several
    boxes.
    """
    cfg = cfg or DetectConfig()
    summary = DetectSummary(masks_in=len(masks))
    detections: list[Detection] = []
    for mask in masks:
        if mask.confidence < cfg.mask_conf_min:
            summary.masks_skipped_conf += 1
            continue
        pts = lift_mask(mask.bitmap, depth, intr, pose, stride=cfg.pixel_stride)
        if len(pts) == 0:
            summary.masks_skipped_empty += 1
            continue
        clusters, _ = dbscan(pts, cfg.eps, cfg.min_pts)
        for idx in clusters:
            if len(idx) < cfg.min_cluster_points:
                summary.clusters_small += 1
                continue
            try:
                obb, stats = fit_obb(pts[idx])
            except DegenerateClusterError:
                summary.clusters_degenerate += 1
                continue
            detections.append(
                Detection(
                    obb=obb,
                    stats=stats,
                    embedding=mask.embedding,
                    confidence=mask.confidence,
                    point_count=len(idx),
                )
            )
    summary.detections = len(detections)
    if summary.clusters_degenerate:
        log.debug("dropped %d degenerate clusters", summary.clusters_degenerate)
    return detections, summary
