"""Dataset layout, file formats, and config parsing.

A dataset directory looks like:

    dataset.txt            key = value manifest (frame count, emb_dim, ...)
    intrinsics.txt         key = value pinhole parameters
    labels.txt, labels.emb labeled reference embeddings (class id -> row)
    gt_instances.txt       ground-truth shapes, one per line (when synthetic)
    masks.emb              every mask embedding of the sequence, row-addressed
    frames/000000.depth.png  16-bit depth in millimetres (0 = no return)
    frames/000000.depth.f32  alternative: raw row-major float32 metres
    frames/000000.rgb.png    8-bit color
    frames/000000.pose.txt   4x4 row-major camera-to-world matrix
    frames/000000.masks.png  16-bit mask image (pixel = mask index + 1)
    frames/000000.masks.txt  per mask: index, confidence, embedding row

Ingest raises IngestError for missing pieces and FormatError for content
that is present but malformed; callers treat the latter as a skippable bad
frame rather than a fatal condition.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .detect import InstanceMask
from .geometry import Intrinsics, Pose
from .rng import Rng
from .semantics import read_embeddings, write_embeddings
from .synth import (
    BoxObject,
    SceneObject,
    SphereObject,
    SynthConfig,
    class_anchor,
    instance_color,
    make_scene,
    orbit_pose,
    render_frame,
    synth_embedding,
)

POSE_ORTHO_TOL = 1e-3


class IngestError(RuntimeError):
    """A required dataset file is missing or unreadable."""


class FormatError(IngestError):
    """A dataset file exists but its contents are malformed."""


@dataclass
class FrameData:
    index: int
    depth: np.ndarray
    rgb: np.ndarray | None
    pose: Pose
    masks: list[InstanceMask]


def parse_keyvalues(path) -> dict[str, str]:
    """Read a `key = value` file; '#' starts a comment, blank lines ignored."""
    if not os.path.isfile(path):
        raise IngestError(f"missing file: {path}")
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def _write_keyvalues(path, pairs: list[tuple[str, object]]) -> None:
    with open(path, "w") as f:
        for k, v in pairs:
            f.write(f"{k} = {v}\n")


def _read_png(path) -> np.ndarray:
    if not os.path.isfile(path):
        raise IngestError(f"missing file: {path}")
    try:
        return np.asarray(Image.open(path))
    except Exception as exc:
        raise FormatError(f"unreadable image {path}: {exc}") from exc


def read_pose(path) -> Pose:
    """Parse a 4x4 row-major camera-to-world matrix.

    Rotations are accepted up to a loose orthogonality tolerance (real
    trajectories accumulate drift) and snapped to the nearest exact rotation.
    """
    if not os.path.isfile(path):
        raise IngestError(f"missing file: {path}")
    try:
        m = np.loadtxt(path)
    except Exception as exc:
        raise FormatError(f"unreadable pose {path}: {exc}") from exc
    if m.shape != (4, 4):
        raise FormatError(f"pose {path} is not a 4x4 matrix")
    r = m[:3, :3]
    if np.max(np.abs(r.T @ r - np.eye(3))) > POSE_ORTHO_TOL or np.linalg.det(r) < 0.5:
        raise FormatError(f"pose {path} rotation is not orthonormal")
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return Pose(r, m[:3, 3])


def write_pose(path, pose: Pose) -> None:
    m = pose.matrix()
    with open(path, "w") as f:
        for row in m:
            f.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_intrinsics(path) -> Intrinsics:
    kv = parse_keyvalues(path)
    try:
        return Intrinsics(
            fx=float(kv["fx"]),
            fy=float(kv["fy"]),
            cx=float(kv["cx"]),
            cy=float(kv["cy"]),
            width=int(kv["width"]),
            height=int(kv["height"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad intrinsics {path}: {exc}") from exc


class Dataset:
    """Random access to one recorded sequence."""

    def __init__(self, root):
        self.root = str(root)
        manifest = parse_keyvalues(os.path.join(self.root, "dataset.txt"))
        try:
            self.n_frames = int(manifest["n_frames"])
            self.depth_scale = float(manifest["depth_scale"])
            self.emb_dim = int(manifest["emb_dim"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad manifest in {self.root}: {exc}") from exc
        self.manifest = manifest
        self.intrinsics = read_intrinsics(os.path.join(self.root, "intrinsics.txt"))
        emb_path = os.path.join(self.root, "masks.emb")
        if not os.path.isfile(emb_path):
            raise IngestError(f"missing file: {emb_path}")
        self._mask_emb = read_embeddings(emb_path)
        if self._mask_emb.shape[1] != self.emb_dim:
            raise FormatError(
                f"mask embeddings are {self._mask_emb.shape[1]}-dimensional, "
                f"manifest says {self.emb_dim}"
            )

    def __len__(self) -> int:
        return self.n_frames

    def _frame_path(self, index: int, suffix: str) -> str:
        return os.path.join(self.root, "frames", f"{index:06d}.{suffix}")

    def _read_depth(self, index: int) -> np.ndarray:
        """Depth in metres: a 16-bit PNG in depth_scale units, or (when the
        PNG is absent) a raw little-endian float32 dump already in metres."""
        png_path = self._frame_path(index, "depth.png")
        if os.path.isfile(png_path):
            raw = _read_png(png_path)
            if raw.ndim != 2:
                raise FormatError(f"frame {index}: depth image is not single-channel")
            return raw.astype(np.float64) / self.depth_scale
        raw_path = self._frame_path(index, "depth.f32")
        if not os.path.isfile(raw_path):
            raise IngestError(f"missing file: {png_path}")
        intr = self.intrinsics
        data = np.fromfile(raw_path, dtype="<f4")
        if data.size != intr.width * intr.height:
            raise FormatError(
                f"frame {index}: raw depth holds {data.size} values, "
                f"expected {intr.width * intr.height}"
            )
        depth = data.astype(np.float64).reshape(intr.height, intr.width)
        depth[~np.isfinite(depth)] = 0.0
        return depth

    def frame(self, index: int) -> FrameData:
        if not (0 <= index < self.n_frames):
            raise IndexError(f"frame {index} out of range")
        depth = self._read_depth(index)
        intr = self.intrinsics
        if depth.shape != (intr.height, intr.width):
            raise FormatError(f"frame {index}: depth shape {depth.shape} mismatches intrinsics")
        rgb_path = self._frame_path(index, "rgb.png")
        rgb = _read_png(rgb_path) if os.path.isfile(rgb_path) else None
        pose = read_pose(self._frame_path(index, "pose.txt"))
        masks = self._read_masks(index)
        return FrameData(index=index, depth=depth, rgb=rgb, pose=pose, masks=masks)

    def _read_masks(self, index: int) -> list[InstanceMask]:
        mask_img = _read_png(self._frame_path(index, "masks.png"))
        if mask_img.shape != (self.intrinsics.height, self.intrinsics.width):
            raise FormatError(f"frame {index}: mask image shape mismatch")
        path = self._frame_path(index, "masks.txt")
        if not os.path.isfile(path):
            raise IngestError(f"missing file: {path}")
        masks = []
        with open(path) as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 3:
                    raise FormatError(f"{path}:{lineno}: expected 'index confidence row'")
                try:
                    mi, conf, row = int(parts[0]), float(parts[1]), int(parts[2])
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
                if not (0 <= row < len(self._mask_emb)):
                    raise FormatError(f"{path}:{lineno}: embedding row {row} out of range")
                e = self._mask_emb[row]
                norm = float(np.linalg.norm(e))
                if norm < 1e-12:
                    raise FormatError(f"{path}:{lineno}: zero embedding")
                masks.append(
                    InstanceMask(
                        bitmap=mask_img == (mi + 1),
                        confidence=conf,
                        embedding=e / norm,
                    )
                )
        return masks

    def label_bank(self) -> list[tuple[int, np.ndarray]]:
        """Ordered (class id, unit embedding) references for classification."""
        kv_path = os.path.join(self.root, "labels.txt")
        emb_path = os.path.join(self.root, "labels.emb")
        if not (os.path.isfile(kv_path) and os.path.isfile(emb_path)):
            raise IngestError(f"dataset {self.root} has no label bank")
        table = read_embeddings(emb_path)
        bank = []
        with open(kv_path) as f:
            for raw in f:
                line = raw.strip()
                if not line:
                    continue
                cls_s, row_s = line.split()
                e = table[int(row_s)]
                bank.append((int(cls_s), e / np.linalg.norm(e)))
        return bank

    def gt_objects(self) -> list[SceneObject]:
        return read_gt_instances(os.path.join(self.root, "gt_instances.txt"))


def read_gt_instances(path) -> list[SceneObject]:
    if not os.path.isfile(path):
        raise IngestError(f"missing file: {path}")
    objects: list[SceneObject] = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                iid, cls, kind = int(parts[0]), int(parts[1]), parts[2]
                if kind == "box":
                    objects.append(
                        BoxObject(
                            instance_id=iid,
                            class_id=cls,
                            center=np.array([float(x) for x in parts[3:6]]),
                            yaw=float(parts[6]),
                            half=np.array([float(x) for x in parts[7:10]]),
                        )
                    )
                elif kind == "sphere":
                    objects.append(
                        SphereObject(
                            instance_id=iid,
                            class_id=cls,
                            center=np.array([float(x) for x in parts[3:6]]),
                            radius=float(parts[6]),
                        )
                    )
                else:
                    raise ValueError(f"unknown shape {kind!r}")
            except (IndexError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return objects


def export_dataset(cfg: SynthConfig, out_dir) -> list[SceneObject]:
    """Generate a synthetic sequence on disk; returns the scene objects.

    Deterministic: the same config always produces byte-identical files.
    Mask confidences and embeddings are drawn fresh per frame (a real
    segmenter would not produce identical outputs twice either).
    """
    out_dir = str(out_dir)
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    rng = Rng(cfg.seed)
    scene = make_scene(cfg, rng)
    intr = cfg.intrinsics()

    with open(os.path.join(out_dir, "gt_instances.txt"), "w") as f:
        for obj in scene:
            if isinstance(obj, BoxObject):
                vals = [*obj.center, obj.yaw, *obj.half]
                f.write(
                    f"{obj.instance_id} {obj.class_id} box "
                    + " ".join(repr(float(v)) for v in vals)
                    + "\n"
                )
            else:
                vals = [*obj.center, obj.radius]
                f.write(
                    f"{obj.instance_id} {obj.class_id} sphere "
                    + " ".join(repr(float(v)) for v in vals)
                    + "\n"
                )

    anchors = np.stack([class_anchor(c, cfg.emb_dim) for c in range(1, cfg.n_classes + 1)])
    write_embeddings(os.path.join(out_dir, "labels.emb"), anchors)
    with open(os.path.join(out_dir, "labels.txt"), "w") as f:
        for c in range(1, cfg.n_classes + 1):
            f.write(f"{c} {c - 1}\n")

    palette = {obj.instance_id: instance_color(obj.instance_id) for obj in scene}
    class_of = {obj.instance_id: obj.class_id for obj in scene}
    all_embeddings: list[np.ndarray] = []
    for fi in range(cfg.n_frames):
        pose = orbit_pose(cfg, fi)
        depth, ids = render_frame(scene, pose, intr)
        depth_mm = np.rint(depth * cfg.depth_scale).astype(np.uint16)
        rgb = np.zeros((intr.height, intr.width, 3), dtype=np.uint8)
        mask_img = np.zeros((intr.height, intr.width), dtype=np.uint16)
        lines = []
        present = [int(i) for i in np.unique(ids) if i != 0]
        for mi, iid in enumerate(present):
            sel = ids == iid
            rgb[sel] = palette[iid]
            mask_img[sel] = mi + 1
            conf = 0.75 + 0.25 * rng.uniform()
            emb = synth_embedding(class_of[iid], cfg.emb_dim, cfg.sigma_noise, rng)
            lines.append(f"{mi} {conf!r} {len(all_embeddings)}")
            all_embeddings.append(emb)
        Image.fromarray(depth_mm).save(os.path.join(frames_dir, f"{fi:06d}.depth.png"))
        Image.fromarray(rgb).save(os.path.join(frames_dir, f"{fi:06d}.rgb.png"))
        Image.fromarray(mask_img).save(os.path.join(frames_dir, f"{fi:06d}.masks.png"))
        write_pose(os.path.join(frames_dir, f"{fi:06d}.pose.txt"), pose)
        with open(os.path.join(frames_dir, f"{fi:06d}.masks.txt"), "w") as f:
            f.write("\n".join(lines) + ("\n" if lines else ""))

    write_embeddings(
        os.path.join(out_dir, "masks.emb"),
        np.asarray(all_embeddings).reshape(len(all_embeddings), cfg.emb_dim),
    )
    _write_keyvalues(
        os.path.join(out_dir, "dataset.txt"),
        [
            ("format", "panmap-dataset"),
            ("version", 1),
            ("n_frames", cfg.n_frames),
            ("width", intr.width),
            ("height", intr.height),
            ("depth_scale", cfg.depth_scale),
            ("emb_dim", cfg.emb_dim),
            ("n_classes", cfg.n_classes),
            ("seed", cfg.seed),
        ],
    )
    _write_keyvalues(
        os.path.join(out_dir, "intrinsics.txt"),
        [
            ("fx", cfg.fx),
            ("fy", cfg.fy),
            ("cx", cfg.cx),
            ("cy", cfg.cy),
            ("width", intr.width),
            ("height", intr.height),
        ],
    )
    return scene


def save_config(path, options: dict[str, object]) -> None:
    _write_keyvalues(path, sorted(options.items()))


def load_config(path) -> dict[str, str]:
    """Read a dotted `section.key = value` options file."""
    return parse_keyvalues(path)
