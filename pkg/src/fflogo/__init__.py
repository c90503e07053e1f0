"""Cross-modality rigid point cloud registration with feature filtering and key-region refinement."""

from fflogo.config import PipelineConfig, load_config
from fflogo.io import load_cloud, save_cloud
from fflogo.pipeline import RegistrationResult, ff_logo_register
from fflogo.pointcloud import PointCloud, apply_transform, estimate_normals, voxel_downsample
from fflogo.transform import RigidTransform, compose, invert

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "PointCloud",
    "RegistrationResult",
    "RigidTransform",
    "apply_transform",
    "compose",
    "estimate_normals",
    "ff_logo_register",
    "invert",
    "load_cloud",
    "load_config",
    "save_cloud",
    "voxel_downsample",
]
