"""Gradient-based per-point saliency maps for point-cloud segmentation networks."""

from .evaluation import DropReport, MetricsRecord, iou, pca_embed, point_drop_experiment
from .geometry import KdTree, PointCloud, SceneConfig, build_kdtree, grid_subsample, synth_scene
from .saliency import (
    GradientInfluence,
    SaliencyMap,
    SaliencyRequest,
    SubsetSpec,
    explain,
    form_heatmap,
    gradient_influence,
    kdtree_upsample,
    select_subset,
    subset_objective,
)
from .segnet import ArchitectureSpec, Checkpoint, forward, predict, train

__version__ = "0.1.0"
