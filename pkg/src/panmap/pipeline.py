"""Frame loop tying fusion, detection, tracking, and labeling together.

Per frame, strictly in this order: fuse depth into the TSDF grid, detect
oriented boxes from the frame's masks, associate them with live tracks,
fuse matched geometry and spawn the leftovers, refresh semantic banks, vote
instance labels into the map, then judge in-view tracks for retirement. The
order matters: labels are voted with the tracks' post-update boxes and the
support test runs against the map as of this frame.

Outputs split into a deterministic part (map snapshot, tracks, report.txt,
all byte-reproducible for a given dataset and config) and wall-clock timings
(timings.txt), which are inherently not.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field

from .dataio import Dataset, IngestError
from .detect import DetectConfig, detect_frame
from .geometry import Frustum
from .semantics import SemanticsConfig
from .track import Tracker, TrackerConfig, save_tracks
from .tsdf import TsdfConfig, VoxelGrid

log = logging.getLogger(__name__)

STAGES = ("integrate", "detect", "associate", "update", "embed", "labels", "prune")

_SECTIONS = {
    "tsdf": TsdfConfig,
    "detect": DetectConfig,
    "track": TrackerConfig,
    "semantics": SemanticsConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    tsdf: TsdfConfig = field(default_factory=TsdfConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    track: TrackerConfig = field(default_factory=TrackerConfig)
    semantics: SemanticsConfig = field(default_factory=SemanticsConfig)


def pipeline_config(options: dict[str, str] | None = None, emb_dim: int | None = None) -> PipelineConfig:
    """Build a config from dotted `section.key` string options.

    Values are coerced to the field's declared default type; unknown sections
    or keys are rejected rather than silently ignored. emb_dim, when given
    (usually from the dataset manifest), fills semantics.emb_dim unless the
    options override it.
    """
    staged: dict[str, dict] = {name: {} for name in _SECTIONS}
    for key, raw in (options or {}).items():
        section, _, fieldname = key.partition(".")
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section {section!r}")
        fields = {f.name: f for f in dataclasses.fields(_SECTIONS[section])}
        if fieldname not in fields:
            raise ValueError(f"unknown option {key!r}")
        default = fields[fieldname].default
        if isinstance(default, int) and not isinstance(default, bool):
            staged[section][fieldname] = int(raw)
        elif isinstance(default, float) or default is None:
            staged[section][fieldname] = float(raw)
        else:
            staged[section][fieldname] = raw
    if emb_dim is not None:
        staged["semantics"].setdefault("emb_dim", emb_dim)
    return PipelineConfig(
        tsdf=TsdfConfig(**staged["tsdf"]),
        detect=DetectConfig(**staged["detect"]),
        track=TrackerConfig(**staged["track"]),
        semantics=SemanticsConfig(**staged["semantics"]),
    )


@dataclass
class PipelineResult:
    grid: VoxelGrid
    tracker: Tracker
    frames_processed: int
    frames_skipped: int
    detections_total: int
    matches_total: int
    timings: dict[str, float]
    report: str


class _StageClock:
    def __init__(self):
        self.totals = {name: 0.0 for name in STAGES}
        self._t0 = 0.0
        self._stage = None

    def start(self, stage: str):
        self._stage = stage
        self._t0 = time.perf_counter()

    def stop(self):
        self.totals[self._stage] += time.perf_counter() - self._t0
        self._stage = None


def run_pipeline(dataset: Dataset, cfg: PipelineConfig | None = None, out_dir=None) -> PipelineResult:
    """Run the full mapping loop over a dataset; optionally write artifacts.

    Frames with malformed content are logged and skipped; the run carries on.
    When out_dir is given, writes map.pmap, tracks.txt, tracks.emb,
    report.txt, and timings.txt there.
    """
    cfg = cfg or pipeline_config(emb_dim=dataset.emb_dim)
    grid = VoxelGrid(cfg.tsdf)
    tracker = Tracker(cfg.track, cfg.semantics)
    clock = _StageClock()
    frames_processed = frames_skipped = 0
    detections_total = matches_total = 0

    def make_result() -> PipelineResult:
        report = _build_report(
            grid, tracker, frames_processed, frames_skipped, detections_total, matches_total
        )
        return PipelineResult(
            grid=grid,
            tracker=tracker,
            frames_processed=frames_processed,
            frames_skipped=frames_skipped,
            detections_total=detections_total,
            matches_total=matches_total,
            timings=dict(clock.totals),
            report=report,
        )

    try:
        for index in range(len(dataset)):
            try:
                frame = dataset.frame(index)
            except IngestError as exc:
                log.warning("skipping frame %d: %s", index, exc)
                frames_skipped += 1
                continue
            n_det, n_match = _run_frame(grid, tracker, dataset, cfg, clock, frame, index)
            frames_processed += 1
            detections_total += n_det
            matches_total += n_match
    except Exception:
        # A failure outside per-frame ingest is not recoverable, but the map
        # built so far is still worth keeping.
        if out_dir is not None:
            write_outputs(make_result(), out_dir)
        raise

    result = make_result()
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def _run_frame(grid, tracker, dataset, cfg, clock, frame, index) -> tuple[int, int]:
    """One frame through the fixed stage order; returns (detections, matches)."""
    clock.start("integrate")
    grid.integrate_frame(frame.depth, dataset.intrinsics, frame.pose, rgb=frame.rgb)
    clock.stop()

    clock.start("detect")
    detections, _ = detect_frame(
        frame.masks, frame.depth, dataset.intrinsics, frame.pose, cfg.detect
    )
    clock.stop()

    clock.start("associate")
    assoc = tracker.associate(detections)
    clock.stop()

    clock.start("update")
    touched: list[int] = []
    for tid, di in assoc.matches:
        tracker.update_track(tid, detections[di], index, update_bank=False)
        touched.append(tid)
    for di in assoc.unmatched_detections:
        touched.append(tracker.spawn(detections[di], index))
    clock.stop()

    clock.start("embed")
    for tid, di in assoc.matches:
        tracker.refresh_bank(tid, detections[di])
    clock.stop()

    clock.start("labels")
    for tid in touched:
        grid.update_labels(tracker.tracks[tid].obb, tid)
    clock.stop()

    clock.start("prune")
    frustum = Frustum.from_camera(
        frame.pose, dataset.intrinsics, cfg.tsdf.depth_min, cfg.tsdf.depth_max
    )
    tracker.end_frame(frustum, grid, matched_ids=set(touched))
    clock.stop()

    return len(detections), len(assoc.matches)


def _build_report(grid, tracker, processed, skipped, detections, matches) -> str:
    lines = [
        "panmap report",
        "stages " + ",".join(STAGES),
        f"frames_processed {processed}",
        f"frames_skipped {skipped}",
        f"voxels {len(grid)}",
        f"detections_total {detections}",
        f"matches_total {matches}",
        f"tracks_spawned {tracker.total_spawned}",
        f"tracks_pruned {tracker.total_pruned}",
        f"tracks_final {len(tracker.tracks)}",
    ]
    for tid in sorted(tracker.tracks):
        tr = tracker.tracks[tid]
        lines.append(
            f"track {tid}"
            + " center " + " ".join(repr(float(x)) for x in tr.obb.center)
            + " extents " + " ".join(repr(float(x)) for x in tr.obb.extents)
            + f" bank {len(tr.bank.entries)}"
        )
    return "\n".join(lines) + "\n"


def write_outputs(result: PipelineResult, out_dir) -> None:
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    result.grid.save(os.path.join(out_dir, "map.pmap"))
    save_tracks(
        result.tracker.tracks,
        os.path.join(out_dir, "tracks.txt"),
        os.path.join(out_dir, "tracks.emb"),
    )
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write(result.report)
    n = max(result.frames_processed, 1)
    with open(os.path.join(out_dir, "timings.txt"), "w") as f:
        for stage in STAGES:
            total = result.timings[stage]
            f.write(f"{stage} total_s {total:.6f} per_frame_ms {1000.0 * total / n:.3f}\n")
        whole = sum(result.timings[s] for s in STAGES)
        f.write(f"total total_s {whole:.6f} per_frame_ms {1000.0 * whole / n:.3f}\n")
