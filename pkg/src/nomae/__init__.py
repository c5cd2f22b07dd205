"""Multi-scale masked occupancy pretraining for sparse LiDAR voxels."""

from .config import RunConfig
from .data import AugmentConfig, SceneConfig, augment, load_points, save_points, synth_scene
from .errors import NomaeError
from .geometry import PointCloud, SparseOccupancy, VoxelPyramid, build_pyramid, voxelize, voxelize_pyramid
from .masking import MaskAssignment, MaskingConfig, Strategy, generate, hmg_generate, mask_stats
from .model import ModelConfig, PretextModel, ScenePlan, pretext_loss
from .neighborhood import NeighborhoodSpec, TargetSet, build_targets, dilate, recovered_lost_accounting
from .training import PipelineConfig, TrainConfig, Trainer, evaluate, prepare_scene

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "MaskAssignment", "MaskingConfig", "ModelConfig", "NeighborhoodSpec", "NomaeError",
    "PipelineConfig", "PointCloud", "PretextModel", "RunConfig", "ScenePlan", "SceneConfig",
    "SparseOccupancy", "Strategy", "TargetSet", "TrainConfig", "Trainer", "VoxelPyramid", "augment",
    "build_pyramid", "build_targets", "dilate", "evaluate", "generate", "hmg_generate", "load_points",
    "mask_stats", "prepare_scene", "pretext_loss", "recovered_lost_accounting", "save_points",
    "synth_scene", "voxelize", "voxelize_pyramid",
]
