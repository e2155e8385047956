"""Exception types raised across the package."""


class SweepFuseError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SweepFuseError):
    """Invalid or unknown configuration input."""


class DataFormatError(SweepFuseError):
    """Malformed file content (trajectory, depth map, image, point cloud)."""


class StreamError(SweepFuseError):
    """Keyframe stream violates ordering or identity constraints."""


class DegenerateGeometryError(SweepFuseError):
    """Camera geometry does not admit the requested computation."""


class AlignmentError(SweepFuseError):
    """Trajectory or cloud alignment has no valid solution or diverged."""


class EvaluationError(SweepFuseError):
    """Metric computation is impossible on the given inputs."""


class RegistrationFailure(SweepFuseError):
    """Frame-to-model registration did not produce a usable pose."""


class SceneError(SweepFuseError):
    """Synthetic scene specification is inconsistent."""
