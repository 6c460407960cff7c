"""Skeleton-conditioned adapter for a frozen flow-matching voxel generator, at desk scale."""

from .adapter import SKAdapterModel, build_model
from .backbone import Backbone, decode_latent, encode_occupancy
from .encoder import SkeletonEncoder, collate_skeletons
from .flow import FlowSampleConfig, TrainConfig, repaint_sample, sample
from .nn_core import ModelConfig, count_params
from .skeleton import Skeleton, relation_matrix, topo_distance_matrix, validate_skeleton

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "FlowSampleConfig",
    "ModelConfig",
    "SKAdapterModel",
    "Skeleton",
    "SkeletonEncoder",
    "TrainConfig",
    "build_model",
    "collate_skeletons",
    "count_params",
    "decode_latent",
    "encode_occupancy",
    "relation_matrix",
    "repaint_sample",
    "sample",
    "topo_distance_matrix",
    "validate_skeleton",
]
