"""Factored 4D scene geometry and motion: representation, losses, metrics, synthetic data and bundles."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AlignmentDegenerateError,
    BundleError,
    DegenerateScaleError,
    DimensionError,
    FourDKitError,
    InvalidIntrinsicsError,
    InvariantViolation,
)
from .geometry import (  # noqa: E402
    Intrinsics,
    MetricScale,
    Pointmap,
    Pose,
    RayDepthMap,
    RayMap,
    SceneFlowField,
    SceneSequence,
    ViewBundle,
    compose_pointmap,
    decompose_pointmap,
)

__all__ = [
    "__version__",
    "AlignmentDegenerateError",
    "BundleError",
    "DegenerateScaleError",
    "DimensionError",
    "FourDKitError",
    "InvalidIntrinsicsError",
    "InvariantViolation",
    "Intrinsics",
    "MetricScale",
    "Pointmap",
    "Pose",
    "RayDepthMap",
    "RayMap",
    "SceneFlowField",
    "SceneSequence",
    "ViewBundle",
    "compose_pointmap",
    "decompose_pointmap",
]
