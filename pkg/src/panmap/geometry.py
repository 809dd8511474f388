"""Core 3D geometry: poses, bounding boxes, frustums, streaming point statistics.

Everything here is a pure function over value types, so any number of callers
may use these concurrently. Conventions used throughout the package:

* the camera looks down +z and depth values are +z distances,
* `Obb.extents` are full side lengths (max - min along each axis),
* rotations are right-handed with columns as the principal axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Eigenvalues closer than this are treated as ties and ordered by the
# lexicographic rule below; eigenvalues below the clamp are zeroed so that
# planar/linear clusters fit without error.
EIGEN_TIE_TOL = 1e-9
EIGEN_CLAMP = 1e-12
ORTHO_TOL = 1e-6


class DegenerateClusterError(ValueError):
    """Point cluster too small to fit an oriented box (fewer than 3 points)."""


def _vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    return a


def _mat3(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {a.shape}")
    return a


def _check_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> None:
    if not np.all(np.isfinite(r)):
        raise ValueError("rotation has non-finite entries")
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("rotation is not right-handed (det != +1)")


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _mat3(self.rotation))
        object.__setattr__(self, "translation", _vec3(self.translation))
        _check_rotation(self.rotation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform camera-frame points (..., 3) into the world frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        """Transform world-frame points (..., 3) into the camera frame."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera intrinsics for a rectified image."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image bounds")


@dataclass(frozen=True)
class Obb:
    """Oriented bounding box: center, rotation (columns = axes), full extents."""

    center: np.ndarray
    rotation: np.ndarray
    extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center))
        object.__setattr__(self, "rotation", _mat3(self.rotation))
        object.__setattr__(self, "extents", _vec3(self.extents))
        _check_rotation(self.rotation)
        if np.any(self.extents < 0):
            raise ValueError("extents must be non-negative")

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def corners(self) -> np.ndarray:
        """The 8 corner points, shape (8, 3)."""
        half = self.extents / 2.0
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        return self.center + (signs * half) @ self.rotation.T

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean inclusion test (boundary counts as inside) for (..., 3) points."""
        local = (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation
        return np.all(np.abs(local) <= self.extents / 2.0, axis=-1)


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box with componentwise min <= max."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", _vec3(self.min))
        object.__setattr__(self, "max", _vec3(self.max))
        if np.any(self.min > self.max):
            raise ValueError("aabb min exceeds max")

    def intersects(self, other: "Aabb") -> bool:
        return bool(np.all(self.min <= other.max) and np.all(other.min <= self.max))

    def inflate(self, margin: float) -> "Aabb":
        return Aabb(self.min - margin, self.max + margin)

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))

    def contains_point(self, p: np.ndarray) -> bool:
        p = _vec3(p)
        return bool(np.all(p >= self.min) and np.all(p <= self.max))

    @property
    def volume(self) -> float:
        return float(np.prod(self.max - self.min))


@dataclass(frozen=True)
class ObbStats:
    """Running count/centroid/scatter of a point set, mergeable in O(1)."""

    count: int
    centroid: np.ndarray
    scatter: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "centroid", _vec3(self.centroid))
        object.__setattr__(self, "scatter", _mat3(self.scatter))
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if self.count == 0 and (np.any(self.centroid) or np.any(self.scatter)):
            raise ValueError("empty stats must have zero centroid and scatter")

    @classmethod
    def empty(cls) -> "ObbStats":
        return cls(0, np.zeros(3), np.zeros((3, 3)))

    @classmethod
    def from_points(cls, points: np.ndarray) -> "ObbStats":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return cls.empty()
        c = pts.mean(axis=0)
        dev = pts - c
        return cls(len(pts), c, dev.T @ dev)

    def covariance(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros((3, 3))
        return self.scatter / (self.count - 1)


@dataclass(frozen=True)
class Frustum:
    """Camera viewing volume as six inward-pointing unit-normal planes.

    A point p is inside iff normals[i] . p + offsets[i] >= 0 for all i
    (boundary counts as inside).
    """

    normals: np.ndarray  # (6, 3)
    offsets: np.ndarray  # (6,)

    def __post_init__(self):
        n = np.asarray(self.normals, dtype=np.float64)
        o = np.asarray(self.offsets, dtype=np.float64)
        if n.shape != (6, 3) or o.shape != (6,):
            raise ValueError("frustum needs 6 planes")
        if np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) > ORTHO_TOL:
            raise ValueError("plane normals must be unit length")
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "offsets", o)

    @classmethod
    def from_camera(cls, pose: Pose, intr: Intrinsics, near: float, far: float) -> "Frustum":
        """Build the world-frame frustum of a camera looking down +z."""
        if not (0 < near < far):
            raise ValueError("require 0 < near < far")
        corner_px = [
            (0.0, 0.0),
            (intr.width - 1.0, 0.0),
            (intr.width - 1.0, intr.height - 1.0),
            (0.0, intr.height - 1.0),
        ]
        dirs = np.array(
            [[(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0] for u, v in corner_px]
        )
        center_dir = np.array([0.0, 0.0, 1.0])
        normals_c = []
        offsets_c = []
        # Side planes pass through the camera origin, one per image edge.
        for i in range(4):
            n = np.cross(dirs[i], dirs[(i + 1) % 4])
            n /= np.linalg.norm(n)
            if np.dot(n, center_dir) < 0:
                n = -n
            normals_c.append(n)
            offsets_c.append(0.0)
        normals_c.append(np.array([0.0, 0.0, 1.0]))   # near: z >= near
        offsets_c.append(-near)
        normals_c.append(np.array([0.0, 0.0, -1.0]))  # far: z <= far
        offsets_c.append(far)

        normals_w = np.asarray(normals_c) @ pose.rotation.T
        offsets_w = np.asarray(offsets_c) - normals_w @ pose.translation
        return cls(normals_w, offsets_w)

    def contains(self, p: np.ndarray) -> bool:
        return bool(np.all(self.normals @ _vec3(p) + self.offsets >= -1e-9))

    def contains_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all(pts @ self.normals.T + self.offsets >= -1e-9, axis=1)


def back_project(px, depth: float, intr: Intrinsics, pose: Pose):
    """Lift one pixel with a depth reading into the world frame.

    Returns None for non-positive or non-finite depth so the caller can skip
    the pixel.
    """
    if not np.isfinite(depth) or depth <= 0:
        return None
    u, v = float(px[0]), float(px[1])
    p_cam = np.array(
        [(u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth]
    )
    return pose.apply(p_cam)


def principal_axes(cov: np.ndarray) -> np.ndarray:
    """Right-handed principal axes of a covariance, deterministically ordered.

    Columns are eigenvectors sorted by descending eigenvalue. Eigenvalues
    within EIGEN_TIE_TOL are ordered by lexicographic comparison of the
    eigenvectors' absolute components; eigenvalues below EIGEN_CLAMP are
    treated as zero (planar and linear clusters are legal inputs). Each axis
    has its largest-magnitude component made positive, then the third axis is
    replaced by v1 x v2 to force det = +1.
    """
    evals, evecs = np.linalg.eigh(_mat3(cov))
    evals = np.where(evals < EIGEN_CLAMP, 0.0, evals)
    order = list(np.argsort(-evals, kind="stable"))
    # Resolve ties by the lexicographic rule so the ordering is reproducible.
    for i in range(2):
        for j in range(i + 1, 3):
            a, b = order[i], order[j]
            if abs(evals[a] - evals[b]) <= EIGEN_TIE_TOL:
                if tuple(np.abs(evecs[:, b])) < tuple(np.abs(evecs[:, a])):
                    order[i], order[j] = order[j], order[i]
    axes = evecs[:, order]
    for i in range(3):
        k = int(np.argmax(np.abs(axes[:, i])))
        if axes[k, i] < 0:
            axes[:, i] = -axes[:, i]
    axes[:, 2] = np.cross(axes[:, 0], axes[:, 1])
    return axes


def fit_obb(points: np.ndarray) -> tuple[Obb, ObbStats]:
    """PCA-fit an oriented box to a point cluster.

    The box axes are the covariance eigenvectors (descending eigenvalue), the
    extents are the spans of the point projections along each axis, and the
    center is the midpoint of those per-axis projection ranges.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateClusterError(f"need at least 3 points, got {len(pts)}")
    stats = ObbStats.from_points(pts)
    axes = principal_axes(stats.covariance())
    proj = pts @ axes
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    center = axes @ ((lo + hi) / 2.0)
    return Obb(center, axes, hi - lo), stats


def merge_stats(a: ObbStats, b: ObbStats) -> ObbStats:
    """Combine two running point statistics as if over the concatenated points."""
    if a.count == 0:
        return b
    if b.count == 0:
        return a
    n = a.count + b.count
    centroid = (a.count * a.centroid + b.count * b.centroid) / n
    dc = a.centroid - b.centroid
    scatter = a.scatter + b.scatter + (a.count * b.count / n) * np.outer(dc, dc)
    return ObbStats(n, centroid, scatter)


def obb_to_aabb(obb: Obb) -> Aabb:
    """Tightest axis-aligned box containing all 8 corners of an oriented box."""
    half = np.abs(obb.rotation) @ (obb.extents / 2.0)
    return Aabb(obb.center - half, obb.center + half)


def obb_iou(a: Obb, b: Obb, resolution: int = 48) -> float:
    """Intersection-over-union of two oriented boxes.

    Deterministic estimate from a regular resolution^3 grid of sample points
    over the AABB enclosing both boxes (cell centers). Exact-polytope clipping
    is deliberately avoided; the error is bounded by the grid pitch, which is
    fine for a matching cost term. Symmetric in its arguments by construction.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    if a.volume == 0.0 or b.volume == 0.0:
        identical = (
            np.array_equal(a.center, b.center)
            and np.array_equal(a.rotation, b.rotation)
            and np.array_equal(a.extents, b.extents)
        )
        return 1.0 if identical else 0.0
    box_a, box_b = obb_to_aabb(a), obb_to_aabb(b)
    if not box_a.intersects(box_b):
        return 0.0
    lo = np.minimum(box_a.min, box_b.min)
    hi = np.maximum(box_a.max, box_b.max)
    pitch = (hi - lo) / resolution
    coords = [lo[i] + (np.arange(resolution) + 0.5) * pitch[i] for i in range(3)]
    pts = np.stack(np.meshgrid(*coords, indexing="ij"), axis=-1).reshape(-1, 3)
    in_a = a.contains(pts)
    in_b = b.contains(pts)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return float(np.count_nonzero(in_a & in_b) / union)


def frustum_contains(f: Frustum, p: np.ndarray) -> bool:
    """True iff p lies on the interior side of all six frustum planes."""
    return f.contains(p)
