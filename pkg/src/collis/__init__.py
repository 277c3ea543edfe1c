"""Collaborative semi-supervised point-cloud segmentation with multiple representation students."""

from .data import ClassMap, DatasetSplit, PointCloud, SceneConfig, generate_scene, read_cloud, split_dataset, write_cloud
from .representations import ReprConfig, ReprMapping, compose_mapping, project, scatter_labels
from .students import FeatureSpec, StudentModel
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ClassMap",
    "DatasetSplit",
    "FeatureSpec",
    "PointCloud",
    "ReprConfig",
    "ReprMapping",
    "SceneConfig",
    "StudentModel",
    "TrainConfig",
    "compose_mapping",
    "generate_scene",
    "project",
    "read_cloud",
    "scatter_labels",
    "split_dataset",
    "train",
    "write_cloud",
]
