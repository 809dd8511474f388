"""Online panoptic 3D mapping.

Fuses registered RGB-D frames into a sparse TSDF voxel map while maintaining
a set of object instances: oriented boxes tracked across frames, per-voxel
instance labels, and per-instance semantic embedding banks that support
open-ended retrieval and classification.
"""

from .assignment import FORBIDDEN, hungarian
from .detect import DetectConfig, Detection, InstanceMask, dbscan, detect_frame, lift_mask
from .geometry import (
    Aabb,
    DegenerateClusterError,
    Frustum,
    Intrinsics,
    Obb,
    ObbStats,
    Pose,
    back_project,
    fit_obb,
    merge_stats,
    obb_iou,
    obb_to_aabb,
    principal_axes,
)
from .pipeline import PipelineConfig, PipelineResult, pipeline_config, run_pipeline
from .rtree import AabbIndex
from .semantics import (
    EmbeddingBank,
    SemanticsConfig,
    bank_confidence,
    bank_similarity,
    bank_update,
    pool_embedding,
)
from .track import Association, Track, Tracker, TrackerConfig, load_tracks, save_tracks
from .tsdf import TsdfConfig, Voxel, VoxelGrid

__version__ = "0.1.0"

__all__ = [
    "Aabb",
    "AabbIndex",
    "Association",
    "DegenerateClusterError",
    "DetectConfig",
    "Detection",
    "EmbeddingBank",
    "FORBIDDEN",
    "Frustum",
    "InstanceMask",
    "Intrinsics",
    "Obb",
    "ObbStats",
    "PipelineConfig",
    "PipelineResult",
    "Pose",
    "SemanticsConfig",
    "Track",
    "Tracker",
    "TrackerConfig",
    "TsdfConfig",
    "Voxel",
    "VoxelGrid",
    "back_project",
    "bank_confidence",
    "bank_similarity",
    "bank_update",
    "dbscan",
    "detect_frame",
    "fit_obb",
    "hungarian",
    "lift_mask",
    "load_tracks",
    "merge_stats",
    "obb_iou",
    "obb_to_aabb",
    "pipeline_config",
    "pool_embedding",
    "principal_axes",
    "run_pipeline",
    "save_tracks",
]
