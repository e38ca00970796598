"""Planetary stereo data engine: curated point clouds, rendered multimodal
sequences and 3-D consistency metrics from stereo imagery."""

from .camera import Intrinsics, Pose
from .errors import RoverscapeError
from .geometry import DepthMap, PointCloud

__version__ = "0.1.0"

__all__ = ["DepthMap", "Intrinsics", "PointCloud", "Pose", "RoverscapeError", "__version__"]
