"""Incremental multi-view depth estimation and surfel fusion.

Three-stage reconstruction from posed image streams: geometric keyframe
bundle sampling, hierarchical plane-sweep stereo with semi-global
optimization (optionally with surface-normal-guided path shifts), and
fusion of the resulting depth maps into a global surfel model, plus the
evaluation protocol used to score trajectories, depth maps and clouds.
"""

from .config import (
    EvalParams,
    PipelineConfig,
    PipelineParams,
    config_to_text,
    load_config,
    parse_config_text,
)
from .errors import (
    AlignmentError,
    ConfigError,
    DataFormatError,
    DegenerateGeometryError,
    EvaluationError,
    RegistrationFailure,
    SceneError,
    StreamError,
    SweepFuseError,
)
from .evaluation import (
    DepthMetrics,
    PointCloud,
    TrajectoryMetrics,
    align_clouds,
    ate_metrics,
    backproject_depth,
    cloud_rmse,
    depth_metrics,
    estimate_normals,
    statistical_outlier_removal,
    trajectory_alignment,
    voxel_downsample,
)
from .fusion import (
    FusionParams,
    RgbdFrame,
    Surfel,
    SurfelMap,
    export_cloud,
    integrate_frame,
    register_frame,
    render_model_view,
    scale_depth,
)
from .geometry import (
    CameraIntrinsics,
    RigidPose,
    SimilarityTransform,
    Trajectory,
    plane_homography,
    relative_pose,
    umeyama_similarity,
)
from .matching import (
    CostVolume,
    DepthRange,
    PlaneSet,
    generate_plane_set,
    local_sweep,
    sweep_cost_volume,
)
from .pipeline import Dataset, PipelineResult, load_dataset, run_pipeline
from .sampler import BundleSampler, ImageBundle, Keyframe, SamplingCriteria
from .sgm import (
    DepthEstimate,
    DepthParams,
    SgmParams,
    hierarchical_estimate,
    sgm_aggregate,
    sgm_sn_aggregate,
    wta_extract,
)
from .synthetic import Box, SyntheticScene, generate_synthetic, scene_preset

__version__ = "0.1.0"
