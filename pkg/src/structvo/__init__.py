"""Monocular visual odometry for Manhattan-world scenes.

Rotation comes from surface normals clustered on the unit sphere, translation
from point and line features with the rotation held fixed.
"""
from .config import PipelineConfig, load_config, parse_config
from .evaluation import MetricReport, Sim3Aligner, Trajectory, align_sim3, evaluate, read_tum, write_tum
from .exceptions import StructVOError
from .geometry import CameraIntrinsics, Pose
from .manhattan import ManhattanRotationEstimator, estimate_manhattan_rotation
from .normals import DepthNormalProvider, FileNormalProvider, NormalMap, SimulatorNormalProvider
from .pipeline import StructureVO

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "DepthNormalProvider",
    "FileNormalProvider",
    "ManhattanRotationEstimator",
    "MetricReport",
    "NormalMap",
    "PipelineConfig",
    "Pose",
    "Sim3Aligner",
    "SimulatorNormalProvider",
    "StructVOError",
    "StructureVO",
    "Trajectory",
    "align_sim3",
    "estimate_manhattan_rotation",
    "evaluate",
    "load_config",
    "parse_config",
    "read_tum",
    "write_tum",
]
