"""Patch-wise segmentation of tiled slides with graph-aggregated neighboring-tile context."""

from .backbone import GncafModel, MiniBackbone, ModelConfig, gncaf_forward, predict_class_mask
from .estimator import GncafSegmenter
from .graph import ContextGraph, build_context_graph, ego_subgraph, hop_distance, normalize_adjacency
from .synthdata import SynthSpec, generate_dataset, generate_slide, generate_slides
from .tiling import SlideImage, TileGrid, compute_foreground_mask, stitch_masks, tile_slide
from .training import MetricsReport, TrainConfig, compute_metrics, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ContextGraph",
    "GncafModel",
    "GncafSegmenter",
    "MetricsReport",
    "MiniBackbone",
    "ModelConfig",
    "SlideImage",
    "SynthSpec",
    "TileGrid",
    "TrainConfig",
    "build_context_graph",
    "compute_foreground_mask",
    "compute_metrics",
    "ego_subgraph",
    "evaluate",
    "generate_dataset",
    "generate_slide",
    "generate_slides",
    "gncaf_forward",
    "hop_distance",
    "normalize_adjacency",
    "predict_class_mask",
    "stitch_masks",
    "tile_slide",
    "train",
]
