"""Motion clips, matching features and the feature database."""
from .clips import (
    DT,
    FPS,
    MIN_CLIP_FRAMES,
    STEP_FRAMES,
    TRAJ_OFFSETS,
    ClipFormatError,
    MotionClip,
    Pose,
    compute_character_frame,
    read_clips,
    write_clips,
)
from .database import DatabaseFormatError, FeatureDatabase, build_feature_database
from .features import (
    FEATURE_DIM,
    POSE_DIM,
    TRAJ_DIM,
    FeatureVector,
    PoseFeature,
    TrajectoryFeature,
    clip_features,
    extract_pose_feature,
    extract_trajectory_feature,
)
from .synth import GaitConfig, GaitConfigError, clip_from_profile, generate_synthetic_locomotion

__all__ = [
    "DT", "FPS", "MIN_CLIP_FRAMES", "STEP_FRAMES", "TRAJ_OFFSETS",
    "ClipFormatError", "MotionClip", "Pose", "compute_character_frame", "read_clips", "write_clips",
    "DatabaseFormatError", "FeatureDatabase", "build_feature_database",
    "FEATURE_DIM", "POSE_DIM", "TRAJ_DIM", "FeatureVector", "PoseFeature", "TrajectoryFeature",
    "clip_features", "extract_pose_feature", "extract_trajectory_feature",
    "GaitConfig", "GaitConfigError", "clip_from_profile", "generate_synthetic_locomotion",
]
