"""End-to-end orchestration: stream keyframes through bundle sampling,
hierarchical depth estimation and surfel fusion, with an optional
three-stage threaded mode connected by bounded queues.

The sequential mode (threads = 0) is the deterministic reference; the
threaded mode must produce the same fused model for the same inputs when
no frames are discarded. Thread count comes from the run_pipeline
argument, else the SWEEPFUSE_THREADS environment variable, else 0.
"""

from __future__ import annotations

import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .errors import DataFormatError, RegistrationFailure
from .formats import (
    ensure_dir,
    read_camera,
    read_image,
    read_trajectory,
    write_cloud,
    write_depth,
    write_trajectory,
)
from .fusion import (
    RgbdFrame,
    SurfelMap,
    export_cloud,
    integrate_frame,
    register_frame,
    scale_depth,
)
from .geometry import CameraIntrinsics, RigidPose, Trajectory
from .sampler import BundleSampler, ImageBundle, Keyframe
from .sgm import DepthEstimate, hierarchical_estimate

log = logging.getLogger("sweepfuse.pipeline")

THREADS_ENV = "SWEEPFUSE_THREADS"
FAILURE_RATIO_LIMIT = 0.25


@dataclass
class Dataset:
    """An on-disk posed image sequence."""

    root: Path
    intrinsics: CameraIntrinsics
    trajectory: Trajectory
    image_paths: list[Path]

    def __len__(self) -> int:
        return len(self.image_paths)


def load_dataset(root) -> Dataset:
    root = Path(root)
    camera = read_camera(root / "camera.txt")
    trajectory = read_trajectory(root / "trajectory.txt")
    image_dir = root / "rgb"
    if not image_dir.is_dir():
        raise DataFormatError(f"missing image directory: {image_dir}")
    paths = sorted(image_dir.glob("*.ppm")) + sorted(image_dir.glob("*.pgm"))
    if len(paths) != len(trajectory.poses):
        raise DataFormatError(
            f"{len(paths)} images but {len(trajectory.poses)} trajectory poses")
    if not paths:
        raise DataFormatError(f"no images under {image_dir}")
    return Dataset(root, camera, trajectory, paths)


@dataclass
class PipelineResult:
    surfel_map: SurfelMap
    trajectory: Trajectory | None  # None when nothing was integrated
    report: dict[str, object]
    status: str
    failures: list[str] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.status == "FAILED"


def _report_text(report: dict[str, object]) -> str:
    lines = []
    for key, value in report.items():
        if isinstance(value, float):
            lines.append(f"{key}={value:.6g}")
        else:
            lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


class _FusionState:
    """Frame-to-model loop: bootstrap, chained init, register, integrate."""

    def __init__(self, config: PipelineConfig) -> None:
        self.map = SurfelMap(params=config.fusion)
        self.prev_slam: RigidPose | None = None
        self.prev_fused: RigidPose | None = None
        self.timestamps: list[float] = []
        self.poses: list[RigidPose] = []
        self.attempted = 0
        self.failures: list[str] = []

    def ingest(self, bundle: ImageBundle, estimate: DepthEstimate,
               scale: float) -> None:
        ref = bundle.reference
        frame = RgbdFrame(
            color=ref.image,
            depth=scale_depth(estimate.depth, scale),
            normals=estimate.normals,
            intrinsics=bundle.intrinsics,
            timestamp=ref.timestamp,
        )
        slam_pose = ref.pose
        if self.prev_slam is None:
            # first depth map bootstraps the model at its tracked pose
            fused = slam_pose
        else:
            init = self.prev_fused.compose(
                self.prev_slam.invert().compose(slam_pose))
            self.attempted += 1
            try:
                fused = register_frame(self.map, frame, init)
            except RegistrationFailure as exc:
                msg = f"frame {ref.frame_id}: {exc}"
                log.warning("registration failed, skipping bundle (%s)", msg)
                self.failures.append(msg)
                return
        integrate_frame(self.map, frame, fused)
        self.prev_slam = slam_pose
        self.prev_fused = fused
        self.timestamps.append(ref.timestamp)
        self.poses.append(fused)


def _resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "0") or 0)
    return max(0, threads)


def run_pipeline(dataset: Dataset, config: PipelineConfig | None = None,
                 out_dir=None, threads: int | None = None,
                 depth_fn=None, frame_interval: float = 0.0) -> PipelineResult:
    """Reconstruct a dataset; returns the model, trajectory and run report.

    depth_fn replaces hierarchical depth estimation when given (used by
    throughput tests); frame_interval > 0 paces frame ingestion to
    simulate a live source in threaded mode.
    """
    config = config or PipelineConfig()
    if depth_fn is None:
        depth_range = config.depth.depth_range()

        def depth_fn(bundle: ImageBundle) -> DepthEstimate:
            return hierarchical_estimate(bundle, depth_range, config.depth)

    sampler = BundleSampler(dataset.intrinsics, config.sampling,
                            bundle_size=config.pipeline.bundle_size)
    fusion = _FusionState(config)
    n_threads = _resolve_threads(threads)

    out_root = ensure_dir(out_dir) if out_dir is not None else None
    depth_dir = ensure_dir(out_root / "depth") if out_root is not None else None

    ingested = 0
    discarded = 0
    bundles = 0
    stage_time = {"sampling": 0.0, "depth": 0.0, "fusion": 0.0}
    t_start = time.perf_counter()

    def make_keyframe(i: int) -> Keyframe:
        return Keyframe(
            frame_id=i,
            timestamp=float(dataset.trajectory.timestamps[i]),
            image=read_image(dataset.image_paths[i]),
            pose=dataset.trajectory.poses[i],
        )

    def run_depth(bundle: ImageBundle):
        t0 = time.perf_counter()
        estimate = depth_fn(bundle)
        stage_time["depth"] += time.perf_counter() - t0
        if depth_dir is not None:
            write_depth(
                depth_dir / f"{bundle.reference.frame_id:06d}.pfm",
                estimate.depth)
        return estimate

    def run_fusion(bundle: ImageBundle, estimate) -> None:
        t0 = time.perf_counter()
        fusion.ingest(bundle, estimate, config.fusion.depth_scale)
        stage_time["fusion"] += time.perf_counter() - t0

    if n_threads == 0:
        for i in range(len(dataset)):
            kf = make_keyframe(i)
            ingested += 1
            t0 = time.perf_counter()
            accepted = sampler.apply_backpressure(False, kf)
            bundle = sampler.push_keyframe(kf) if accepted else None
            stage_time["sampling"] += time.perf_counter() - t0
            if bundle is None:
                continue
            bundles += 1
            run_fusion(bundle, run_depth(bundle))
    else:
        capacity = config.pipeline.queue_capacity
        q_bundle: queue.Queue = queue.Queue(maxsize=capacity)
        q_depth: queue.Queue = queue.Queue(maxsize=capacity)
        errors: list[BaseException] = []

        # On a stage error the worker keeps draining its queue so the other
        # stages never block on a full/stuck bounded queue; the error is
        # re-raised on the caller thread after join.
        def depth_worker() -> None:
            failed = False
            while True:
                item = q_bundle.get()
                if item is None:
                    q_bundle.task_done()
                    q_depth.put(None)
                    return
                if not failed and not errors:
                    try:
                        q_depth.put((item, run_depth(item)))
                    except BaseException as exc:
                        errors.append(exc)
                        failed = True
                q_bundle.task_done()

        def fusion_worker() -> None:
            failed = False
            while True:
                item = q_depth.get()
                if item is None:
                    q_depth.task_done()
                    return
                if not failed:
                    try:
                        run_fusion(*item)
                    except BaseException as exc:
                        errors.append(exc)
                        failed = True
                q_depth.task_done()

        workers = [threading.Thread(target=depth_worker, daemon=True),
                   threading.Thread(target=fusion_worker, daemon=True)]
        for w in workers:
            w.start()
        next_due = time.perf_counter()
        for i in range(len(dataset)):
            if errors:
                break
            kf = make_keyframe(i)
            if frame_interval > 0:
                next_due += frame_interval
                delay = next_due - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
            ingested += 1
            t0 = time.perf_counter()
            depth_busy = q_bundle.unfinished_tasks > 0
            accepted = sampler.apply_backpressure(depth_busy, kf)
            bundle = sampler.push_keyframe(kf) if accepted else None
            stage_time["sampling"] += time.perf_counter() - t0
            if not accepted:
                discarded += 1
                continue
            if bundle is not None:
                bundles += 1
                q_bundle.put(bundle)
        q_bundle.put(None)
        for w in workers:
            w.join()
        if errors:
            raise errors[0]

    total_time = time.perf_counter() - t_start
    traj = None
    if fusion.poses:
        traj = Trajectory(np.asarray(fusion.timestamps, dtype=np.float64),
                          fusion.poses)
    ratio = (len(fusion.failures) / fusion.attempted
             if fusion.attempted > 0 else 0.0)
    status = "FAILED" if ratio > FAILURE_RATIO_LIMIT else "OK"
    report: dict[str, object] = {
        "frames_ingested": ingested,
        "frames_discarded": discarded,
        "bundles_emitted": bundles,
        "subsampling_ratio": (bundles / ingested) if ingested else 0.0,
        "depth_maps": bundles,
        "registrations_attempted": fusion.attempted,
        "registration_failures": len(fusion.failures),
        "failure_ratio": ratio,
        "frames_integrated": len(fusion.poses),
        "surfel_count": len(fusion.map),
        "time_sampling_s": stage_time["sampling"],
        "time_depth_s": stage_time["depth"],
        "time_fusion_s": stage_time["fusion"],
        "time_total_s": total_time,
        "status": status,
    }

    if out_root is not None:
        cloud = export_cloud(fusion.map, config.fusion.min_export_confidence)
        write_cloud(out_root / "model.ply", cloud.points, cloud.normals,
                    cloud.colors)
        if traj is not None:
            write_trajectory(out_root / "fused_trajectory.txt", traj)
        (out_root / "report.txt").write_text(_report_text(report))

    return PipelineResult(fusion.map, traj, report, status,
                          list(fusion.failures))
