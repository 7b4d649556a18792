"""Exception hierarchy shared across the calibration engine."""


class CamcalError(Exception):
    """Base class for every error raised by this package."""


class BehindCameraError(CamcalError):
    """A 3D point ended up at non-positive depth in the camera frame."""


class NonConvergenceError(CamcalError):
    """An iterative solver failed to reach its tolerance."""


class DegenerateConfigurationError(CamcalError):
    """Input geometry is rank-deficient (collinear points, parallel poses, zero-area target)."""


class InsufficientFramesError(CamcalError):
    """Not enough views for the requested camera model."""


class SingularNormalEquationsError(CamcalError):
    """The normal equations stay singular even under heavy damping."""


class UnobservableParameterError(CamcalError):
    """A parameter is unconstrained by the data (singular covariance block)."""


class InvisiblePoseError(CamcalError):
    """The board at the given pose does not project fully inside the image."""


class DetectionTooSparseError(CamcalError):
    """A detected frame carries fewer corners than the minimum usable count."""


class NoVisibleBoardError(CamcalError):
    """Startup never saw a fully visible board."""
