"""Hierarchical hybrid hand pose estimation on depth images.

The package estimates 21 hand joints from a depth frame in three acts:
attention-warped cascaded regression over a four-layer kinematic
hierarchy, an explicit hand model with forward and inverse kinematics, and
a partial particle swarm that projects each layer's estimate back onto the
kinematic constraints.  A synthetic renderer and an evaluation CLI close
the loop for end-to-end validation.
"""

__version__ = "0.1.0"

from .cascade import (
    CascadeConfig,
    CascadeModel,
    PipelineState,
    Predictor,
    RidgePredictor,
    build_pyramid,
    refine_stage,
    run_layer,
    run_layer0,
    train_pipeline,
)
from .config import PipelineConfig, load_config, load_skeleton, save_skeleton
from .errors import (
    ConfigError,
    DataFormatError,
    DataQualityWarning,
    DegenerateGeometryWarning,
    HierhandError,
    RenderError,
)
from .metrics import MetricCurve, compute_metric, default_thresholds, joint_errors
from .pipeline import infer_frame, infer_frames, load_model, save_model
from .pso import (
    ObservationContext,
    Particle,
    RefineResult,
    SwarmConfig,
    likelihood_energy,
    optimize_swarm,
    prior_energy,
    pso_step,
    refine_partial_pose,
)
from .skeleton import (
    BoneRotations,
    GlobalPose,
    HandSkeleton,
    JointLocations,
    PoseParams,
    forward_kinematics,
    infer_bone_rotations,
    infer_global_pose,
    place_layer_joints,
)
from .synth import DepthFrame, OrthoCamera, PoseSampler, Sample, generate_dataset, render
from .transform import (
    AffineTransform2D,
    RasterGrid,
    compute_rotation,
    estimate_crop_ratio,
    map_point,
    resample,
    transform_points,
)

__all__ = [name for name in dir() if not name.startswith("_")]
