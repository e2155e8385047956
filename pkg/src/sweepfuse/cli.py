"""Command line front end.

Subcommands: synth (generate a dataset), reconstruct (full pipeline),
depth (estimate one bundle), eval-traj / eval-depth / eval-cloud
(evaluation protocol). Exit codes: 0 success, 1 evaluation or model
failure, 2 usage/config/data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, synthetic
from .config import PipelineConfig, load_config
from .errors import (
    ConfigError,
    DataFormatError,
    EvaluationError,
    SceneError,
    StreamError,
    SweepFuseError,
)
from .formats import (
    ensure_dir,
    read_cloud,
    read_depth,
    read_image,
    read_trajectory,
    write_depth,
)
from .geometry import SimilarityTransform
from .pipeline import load_dataset, run_pipeline
from .sampler import BundleSampler, Keyframe
from .sgm import hierarchical_estimate

_USAGE_ERRORS = (ConfigError, DataFormatError, StreamError, SceneError)


def _load_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return PipelineConfig()


def _cmd_synth(args) -> int:
    scene = synthetic.scene_preset(args.preset, frames=args.frames,
                                   seed=args.seed)
    synthetic.generate_synthetic(scene, args.out)
    print(f"dataset={args.out}")
    print(f"frames={scene.frames}")
    return 0


def _cmd_reconstruct(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.dataset)
    result = run_pipeline(dataset, config, out_dir=args.out,
                          threads=args.threads)
    for key, value in result.report.items():
        if isinstance(value, float):
            print(f"{key}={value:.6g}")
        else:
            print(f"{key}={value}")
    return 1 if result.failed else 0


def _cmd_depth(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.dataset)
    sampler = BundleSampler(dataset.intrinsics, config.sampling,
                            bundle_size=config.pipeline.bundle_size)
    target = None
    emitted = 0
    for i, path in enumerate(dataset.image_paths):
        kf = Keyframe(frame_id=i,
                      timestamp=float(dataset.trajectory.timestamps[i]),
                      image=read_image(path),
                      pose=dataset.trajectory.poses[i])
        bundle = sampler.push_keyframe(kf)
        if bundle is not None:
            if emitted == args.bundle:
                target = bundle
                break
            emitted += 1
    if target is None:
        raise EvaluationError(
            f"dataset produced {emitted} bundles; index {args.bundle} not reached")
    estimate = hierarchical_estimate(target, config.depth.depth_range(),
                                     config.depth)
    out = Path(args.out)
    ensure_dir(out.parent)
    write_depth(out, estimate.depth)
    valid = estimate.depth > 0
    print(f"reference_frame={target.reference.frame_id}")
    print(f"valid_fraction={float(np.mean(valid)):.6g}")
    print(f"depth_map={args.out}")
    return 0


def _cmd_eval_traj(args) -> int:
    est = read_trajectory(args.est)
    gt = read_trajectory(args.gt)
    m = evaluation.ate_metrics(est, gt)
    print(f"rmse={m.rmse:.9g}")
    print(f"mae={m.mae:.9g}")
    print(f"sigma={m.sigma:.9g}")
    return 0


def _cmd_eval_depth(args) -> int:
    est = read_depth(args.est)
    gt = read_depth(args.gt)
    m = evaluation.depth_metrics(est, gt, cap=args.cap)
    print(f"rmse={m.rmse:.9g}")
    print(f"mae={m.mae:.9g}")
    print(f"delta_125={m.delta_125:.9g}")
    print(f"delta_105={m.delta_105:.9g}")
    return 0


def _read_point_cloud(path) -> evaluation.PointCloud:
    points, normals, colors = read_cloud(path)
    return evaluation.PointCloud(points, colors, normals)


def _cmd_eval_cloud(args) -> int:
    est = _read_point_cloud(args.est)
    gt = _read_point_cloud(args.gt)
    if args.est_traj and args.gt_traj:
        traj_sim = evaluation.trajectory_alignment(
            read_trajectory(args.est_traj), read_trajectory(args.gt_traj))
    else:
        traj_sim = SimilarityTransform.identity()
    if args.outlier_k > 0 and len(est) > args.outlier_k:
        est = evaluation.statistical_outlier_removal(
            est, k=args.outlier_k, std_ratio=args.outlier_std)
    if args.voxel > 0:
        est = evaluation.voxel_downsample(est, args.voxel)
    aligned, _ = evaluation.align_clouds(est, gt, traj_sim)
    dist = evaluation.nearest_distances(aligned, gt)
    print(f"points_est={len(aligned)}")
    print(f"points_gt={len(gt)}")
    print(f"rmse={float(np.sqrt(np.mean(dist ** 2))):.9g}")
    print(f"sigma={float(np.std(dist)):.9g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sweepfuse",
        description="Incremental multi-view depth estimation and surfel fusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("out", help="output dataset directory")
    p.add_argument("--preset", default="orbit",
                   choices=("orbit", "fronto", "slant"))
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("reconstruct", help="run the full pipeline")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("out", help="output directory")
    p.add_argument("--config", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("depth", help="estimate depth for one bundle")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("out", help="output depth map (.pfm)")
    p.add_argument("--config", default=None)
    p.add_argument("--bundle", type=int, default=0,
                   help="bundle index within the dataset")
    p.set_defaults(func=_cmd_depth)

    p = sub.add_parser("eval-traj", help="absolute trajectory error")
    p.add_argument("est")
    p.add_argument("gt")
    p.set_defaults(func=_cmd_eval_traj)

    p = sub.add_parser("eval-depth", help="depth-map error metrics")
    p.add_argument("est")
    p.add_argument("gt")
    p.add_argument("--cap", type=float, default=300.0)
    p.set_defaults(func=_cmd_eval_depth)

    p = sub.add_parser("eval-cloud", help="aligned point-cloud RMSE")
    p.add_argument("est")
    p.add_argument("gt")
    p.add_argument("--est-traj", default=None)
    p.add_argument("--gt-traj", default=None)
    p.add_argument("--voxel", type=float, default=0.01)
    p.add_argument("--outlier-k", type=int, default=100)
    p.add_argument("--outlier-std", type=float, default=1.0)
    p.set_defaults(func=_cmd_eval_cloud)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SweepFuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
