"""Curve grouping and curve aggregation for point clouds on a small numpy autodiff core."""
from .autodiff import DimensionError, NonFiniteError, Tape, TapeError, Tensor, backward, grad_check
from .geometry import NeighborGraph, PointCloud, farthest_point_sample, knn
from .walk import CurveSet, CurveStats, WalkPolicy, curve_stats, group_curves
from .aggregate import CicBlock, CicConfig, CurveAggregation, cic_block, curve_aggregate
from .model import CurveNet, CurveNetConfig, TrainConfig, build, desk_config, train

__version__ = "0.1.0"

__all__ = [
    "CicBlock", "CicConfig", "CurveAggregation", "CurveNet", "CurveNetConfig", "CurveSet",
    "CurveStats", "DimensionError", "NeighborGraph", "NonFiniteError", "PointCloud", "Tape",
    "TapeError", "Tensor", "TrainConfig", "WalkPolicy", "backward", "build", "cic_block",
    "curve_aggregate", "curve_stats", "desk_config", "farthest_point_sample", "grad_check",
    "group_curves", "knn", "train",
]
