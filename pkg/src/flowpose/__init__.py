"""Object pose estimation by conditional flow matching on point clouds.

A partial observation of a known object is denoised into the object's
canonical frame by a learned velocity field; the pose then follows from
robust rigid registration of the observation onto that estimate.
"""

from .errors import DegenerateError, DivergenceError, FlowposeError, ParseError, ValidationError
from .geom import PointCloud, RigidTransform
from .pipeline import PipelineConfig, PoseMetrics, estimate_pose, eval_metrics
from .scenes import SceneRecord, SceneSpec, generate_scene

__version__ = "0.1.0"

__all__ = [
    "DegenerateError", "DivergenceError", "FlowposeError", "ParseError", "ValidationError",
    "PointCloud", "RigidTransform", "PipelineConfig", "PoseMetrics", "estimate_pose", "eval_metrics",
    "SceneRecord", "SceneSpec", "generate_scene",
]
