"""Interactive camera-calibration engine: annealing-based pose selection,
step-by-step placement guidance, and a simulated-camera benchmark harness."""

from .geometry import (
    BoardSpec,
    CameraTruth,
    Distortion,
    Intrinsics,
    Pose,
    decompose_pose,
    distort,
    euler_to_rotation,
    project,
    project_board,
    rotation_to_euler,
    undistort,
)
from .calibration import (
    CalibrationConfig,
    CalibrationEstimate,
    DetectedFrame,
    PARAM_NAMES,
    calibrate,
    closed_form_intrinsics,
    estimate_homography,
    extrinsics_from_homography,
    parameter_variances,
    refine,
)

__all__ = [
    "BoardSpec",
    "CameraTruth",
    "Distortion",
    "Intrinsics",
    "Pose",
    "decompose_pose",
    "distort",
    "euler_to_rotation",
    "project",
    "project_board",
    "rotation_to_euler",
    "undistort",
    "CalibrationConfig",
    "CalibrationEstimate",
    "DetectedFrame",
    "PARAM_NAMES",
    "calibrate",
    "closed_form_intrinsics",
    "estimate_homography",
    "extrinsics_from_homography",
    "parameter_variances",
    "refine",
]

__version__ = "0.1.0"
