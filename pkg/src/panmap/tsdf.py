"""Sparse truncated signed distance fusion over a voxel hash.

The grid stores only voxels that have ever fallen inside the truncation band
of an observed surface. Storage is columnar: one sorted array of packed
integer keys plus parallel per-voxel attribute arrays, which keeps frame
integration fully vectorized and makes snapshot bytes reproducible (rows are
always emitted in key order).

Each voxel carries the fused signed distance, an integration weight, a color,
and an instance-label histogram summarised by its current argmax.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Obb, Pose

_PMAP_MAGIC = b"PMAP"
_PMAP_VERSION = 1

# Packed key layout: 21 bits per axis, biased by 2^20 so negatives pack too.
_BIAS = 1 << 20
_SPAN = 1 << 21


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Packs integer voxel coords (n, 3) into sortable int64 keys.

    Packing preserves lexicographic (i, j, k) order, so sorting keys sorts
    coordinates.
    """
    c = np.asarray(coords, dtype=np.int64)
    if np.any(c < -_BIAS) or np.any(c >= _BIAS):
        raise ValueError("voxel coordinate outside packable range")
    return ((c[:, 0] + _BIAS) << 42) | ((c[:, 1] + _BIAS) << 21) | (c[:, 2] + _BIAS)


def unpack_coords(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    out = np.empty((len(k), 3), dtype=np.int32)
    out[:, 0] = (k >> 42) - _BIAS
    out[:, 1] = ((k >> 21) & (_SPAN - 1)) - _BIAS
    out[:, 2] = (k & (_SPAN - 1)) - _BIAS
    return out


@dataclass(frozen=True)
class TsdfConfig:
    voxel_size: float = 0.02
    truncation: float = 0.08
    max_weight: float = 64.0
    depth_min: float = 0.1
    depth_max: float = 6.0

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.truncation < self.voxel_size:
            raise ValueError("truncation must be at least one voxel")
        if self.max_weight <= 0:
            raise ValueError("max_weight must be positive")
        if not (0 < self.depth_min < self.depth_max):
            raise ValueError("require 0 < depth_min < depth_max")


@dataclass(frozen=True)
class Voxel:
    """Read-only view of one voxel's state."""

    coord: tuple[int, int, int]
    distance: float
    weight: float
    color: np.ndarray
    label: int  # 0 means unlabeled
    histogram: dict[int, int]


class VoxelGrid:
    """Sparse TSDF volume with per-voxel instance-label histograms."""

    def __init__(self, cfg: TsdfConfig | None = None):
        self.cfg = cfg or TsdfConfig()
        self._keys = np.empty(0, dtype=np.int64)
        self._coords = np.empty((0, 3), dtype=np.int32)
        self._d = np.empty(0, dtype=np.float64)
        self._w = np.empty(0, dtype=np.float64)
        self._rgb = np.empty((0, 3), dtype=np.float64)  # 0..255
        self._label = np.empty(0, dtype=np.int64)
        self._labelcnt = np.empty(0, dtype=np.int64)
        self._hist: dict[int, dict[int, int]] = {}

    def __len__(self) -> int:
        return len(self._keys)

    @property
    def voxel_size(self) -> float:
        return self.cfg.voxel_size

    def centers(self) -> np.ndarray:
        """World-space centers of all stored voxels, in key order."""
        return (self._coords.astype(np.float64) + 0.5) * self.cfg.voxel_size

    def world_to_coords(self, points: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(points, dtype=np.float64) / self.cfg.voxel_size).astype(np.int64)

    def integrate_frame(
        self,
        depth: np.ndarray,
        intr: Intrinsics,
        pose: Pose,
        rgb: np.ndarray | None = None,
    ) -> int:
        """Fuse one registered depth frame; returns voxels touched.

        For every valid depth pixel the ray is sampled through the truncation
        band around the hit, the touched voxels are deduplicated, and each is
        re-projected into the frame to compute its signed distance to the
        observed surface. Voxels more than one truncation behind the surface
        are occluded and left alone; distances ahead are clamped to +truncation.
        """
        cfg = self.cfg
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != (intr.height, intr.width):
            raise ValueError("depth image does not match intrinsics")
        valid = np.isfinite(depth) & (depth >= cfg.depth_min) & (depth <= cfg.depth_max)
        if not valid.any():
            return 0

        vs, tau = cfg.voxel_size, cfg.truncation
        v_px, u_px = np.nonzero(valid)
        z = depth[v_px, u_px]
        # Per-unit-depth ray directions; multiplying by a z value lands on the ray.
        dir_per_z = np.stack(
            [(u_px - intr.cx) / intr.fx, (v_px - intr.cy) / intr.fy, np.ones_like(z)], axis=1
        )
        offsets = np.arange(-tau, tau + vs * 0.25, vs * 0.5)
        z_samples = z[:, None] + offsets[None, :]
        keep = z_samples > 1e-6
        p_cam = dir_per_z[:, None, :] * z_samples[:, :, None]
        p_world = pose.apply(p_cam[keep])
        cand_keys = np.unique(pack_coords(self.world_to_coords(p_world)))

        # Re-project candidate voxel centers to get their true signed distance.
        centers = (unpack_coords(cand_keys).astype(np.float64) + 0.5) * vs
        local = pose.inverse_apply(centers)
        z_c = local[:, 2]
        ok = z_c > 1e-6
        u = np.full(len(cand_keys), -1, dtype=np.int64)
        v = np.full(len(cand_keys), -1, dtype=np.int64)
        u[ok] = np.rint(local[ok, 0] / z_c[ok] * intr.fx + intr.cx).astype(np.int64)
        v[ok] = np.rint(local[ok, 1] / z_c[ok] * intr.fy + intr.cy).astype(np.int64)
        ok &= (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
        ok[ok] &= valid[v[ok], u[ok]]
        if not ok.any():
            return 0
        sd = depth[v[ok], u[ok]] - z_c[ok]
        keys = cand_keys[ok]
        in_band = sd >= -tau
        keys = keys[in_band]
        d_obs = np.minimum(sd[in_band], tau)
        if len(keys) == 0:
            return 0

        if rgb is not None:
            rgb = np.asarray(rgb, dtype=np.float64)
            if rgb.shape != (intr.height, intr.width, 3):
                raise ValueError("rgb image does not match intrinsics")
            c_obs = rgb[v[ok], u[ok]][in_band]
        else:
            c_obs = None

        self._merge(keys, d_obs, c_obs)
        return len(keys)

    def _merge(self, keys: np.ndarray, d_obs: np.ndarray, c_obs: np.ndarray | None) -> None:
        pos = np.searchsorted(self._keys, keys)
        if len(self._keys) == 0:
            exists = np.zeros(len(keys), dtype=bool)
        else:
            clamped = np.minimum(pos, len(self._keys) - 1)
            exists = (pos < len(self._keys)) & (self._keys[clamped] == keys)

        idx = pos[exists]
        w_old = self._w[idx]
        self._d[idx] = (w_old * self._d[idx] + d_obs[exists]) / (w_old + 1.0)
        if c_obs is not None:
            self._rgb[idx] = (w_old[:, None] * self._rgb[idx] + c_obs[exists]) / (w_old[:, None] + 1.0)
        self._w[idx] = np.minimum(w_old + 1.0, self.cfg.max_weight)

        new = ~exists
        if new.any():
            nk = keys[new]
            at = pos[new]
            self._keys = np.insert(self._keys, at, nk)
            self._coords = np.insert(self._coords, at, unpack_coords(nk), axis=0)
            self._d = np.insert(self._d, at, d_obs[new])
            self._w = np.insert(self._w, at, 1.0)
            add_c = c_obs[new] if c_obs is not None else np.zeros((len(nk), 3))
            self._rgb = np.insert(self._rgb, at, add_c, axis=0)
            self._label = np.insert(self._label, at, 0)
            self._labelcnt = np.insert(self._labelcnt, at, 0)

    def update_labels(self, obb: Obb, instance_id: int) -> int:
        """Vote an instance id onto the near-surface voxels inside a box.

        Each voxel keeps a full id histogram; its exposed label is the
        histogram argmax with ties broken toward the smaller id. Returns the
        number of voxels that received a vote.
        """
        if instance_id <= 0:
            raise ValueError("instance ids must be positive")
        if len(self._keys) == 0:
            return 0
        near = np.abs(self._d) <= self.cfg.truncation
        if not near.any():
            return 0
        rows = np.nonzero(near)[0]
        inside = obb.contains(self.centers()[rows])
        rows = rows[inside]
        for r in rows:
            h = self._hist.setdefault(int(self._keys[r]), {})
            c = h.get(instance_id, 0) + 1
            h[instance_id] = c
            if self._label[r] == instance_id:
                self._labelcnt[r] = c
            elif (
                self._label[r] == 0
                or c > self._labelcnt[r]
                or (c == self._labelcnt[r] and instance_id < self._label[r])
            ):
                self._label[r] = instance_id
                self._labelcnt[r] = c
        return len(rows)

    def support_ratio(self, obb: Obb, instance_id: int) -> float:
        """Fraction of an instance's expected volume actually carrying its label.

        The denominator is the number of voxels the box could hold
        (ceil(volume / voxel^3)); the numerator counts near-surface voxels
        inside the box whose argmax label is the instance.
        """
        expected = obb.volume / self.cfg.voxel_size**3
        if expected <= 0.0:
            return 0.0
        if len(self._keys) == 0:
            return 0.0
        mask = (self._label == instance_id) & (np.abs(self._d) <= self.cfg.truncation)
        if not mask.any():
            return 0.0
        inside = obb.contains(self.centers()[mask])
        return float(np.count_nonzero(inside)) / math.ceil(expected)

    def extract_instance_points(self, instance_id: int) -> tuple[np.ndarray, np.ndarray]:
        """Surface voxel centers and colors currently labeled with an instance."""
        mask = (self._label == instance_id) & (np.abs(self._d) < self.cfg.voxel_size)
        return self.centers()[mask], self._rgb[mask].copy()

    def surface_points(self) -> np.ndarray:
        """Centers of all voxels within one voxel of the zero crossing."""
        return self.centers()[np.abs(self._d) < self.cfg.voxel_size]

    def labels_present(self) -> list[int]:
        ids = np.unique(self._label)
        return [int(i) for i in ids if i != 0]

    def voxel_at(self, coord) -> Voxel | None:
        key = pack_coords(np.asarray(coord, dtype=np.int64).reshape(1, 3))[0]
        pos = int(np.searchsorted(self._keys, key))
        if pos >= len(self._keys) or self._keys[pos] != key:
            return None
        return Voxel(
            coord=tuple(int(x) for x in self._coords[pos]),
            distance=float(self._d[pos]),
            weight=float(self._w[pos]),
            color=self._rgb[pos].copy(),
            label=int(self._label[pos]),
            histogram=dict(self._hist.get(int(key), {})),
        )

    def save(self, path) -> None:
        """Serialize to the binary snapshot format (byte-reproducible)."""
        with open(path, "wb") as f:
            f.write(_PMAP_MAGIC)
            f.write(struct.pack("<Iff", _PMAP_VERSION, self.cfg.voxel_size, self.cfg.truncation))
            f.write(struct.pack("<Q", len(self._keys)))
            rgb_u8 = np.clip(np.rint(self._rgb), 0, 255).astype(np.uint8)
            for r in range(len(self._keys)):
                hist = self._hist.get(int(self._keys[r]), {})
                f.write(
                    struct.pack(
                        "<iiiff3BIH",
                        int(self._coords[r, 0]),
                        int(self._coords[r, 1]),
                        int(self._coords[r, 2]),
                        float(self._d[r]),
                        float(self._w[r]),
                        int(rgb_u8[r, 0]),
                        int(rgb_u8[r, 1]),
                        int(rgb_u8[r, 2]),
                        int(self._label[r]),
                        len(hist),
                    )
                )
                for iid in sorted(hist):
                    f.write(struct.pack("<II", iid, hist[iid]))

    @classmethod
    def load(cls, path, cfg: TsdfConfig | None = None) -> "VoxelGrid":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _PMAP_MAGIC:
                raise ValueError(f"bad map snapshot magic {magic!r}")
            version, voxel_size, truncation = struct.unpack("<Iff", f.read(12))
            if version != _PMAP_VERSION:
                raise ValueError(f"unsupported map snapshot version {version}")
            base = cfg or TsdfConfig()
            grid = cls(
                TsdfConfig(
                    voxel_size=float(voxel_size),
                    truncation=float(truncation),
                    max_weight=base.max_weight,
                    depth_min=base.depth_min,
                    depth_max=base.depth_max,
                )
            )
            (count,) = struct.unpack("<Q", f.read(8))
            coords = np.empty((count, 3), dtype=np.int32)
            d = np.empty(count, dtype=np.float64)
            w = np.empty(count, dtype=np.float64)
            rgb = np.empty((count, 3), dtype=np.float64)
            label = np.empty(count, dtype=np.int64)
            labelcnt = np.zeros(count, dtype=np.int64)
            row_size = struct.calcsize("<iiiff3BIH")
            for r in range(count):
                buf = f.read(row_size)
                if len(buf) != row_size:
                    raise ValueError("map snapshot truncated")
                i, j, k, dv, wv, cr, cg, cb, lab, nhist = struct.unpack("<iiiff3BIH", buf)
                coords[r] = (i, j, k)
                d[r], w[r] = dv, wv
                rgb[r] = (cr, cg, cb)
                label[r] = lab
                if nhist:
                    hbuf = f.read(8 * nhist)
                    if len(hbuf) != 8 * nhist:
                        raise ValueError("map snapshot truncated")
                    pairs = struct.unpack("<" + "II" * nhist, hbuf)
                    hist = {pairs[2 * t]: pairs[2 * t + 1] for t in range(nhist)}
                    key = int(pack_coords(coords[r].reshape(1, 3).astype(np.int64))[0])
                    grid._hist[key] = hist
                    if lab:
                        labelcnt[r] = hist.get(lab, 0)
        grid._coords = coords
        grid._keys = pack_coords(coords.astype(np.int64))
        if count > 1 and np.any(np.diff(grid._keys) <= 0):
            raise ValueError("map snapshot rows out of order")
        grid._d, grid._w, grid._rgb = d, w, rgb
        grid._label, grid._labelcnt = label, labelcnt
        return grid
