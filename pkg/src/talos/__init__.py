"""Test-time adaptation for LiDAR semantic scene completion.

Observations from other moments of a sequence become supervision for the
current prediction: line-of-sight carving gives occupied/empty targets and
reliable predictions give semantic pseudo labels. A per-step moment model
and a slowly updated gradual model share the work.
"""
from .experiment import DesktopSetup, Report, ablation, emit_bev, run_experiment
from .geometry import PointCloud, Pose, relative_pose, transform_cloud
from .los_supervision import StaticClassMask, build_comp_map
from .metrics import MetricAccumulator
from .model import ToyVoxelModel
from .scheduler import SchedulerConfig, TALoSAdapter
from .semantic_supervision import aggregate_pseudo_gt, pseudo_gt, reliability
from .voxel_core import KITTI_SPEC, GridSpec, LabelGrid, ProbGrid

__version__ = "0.1.0"

__all__ = [
    "DesktopSetup",
    "GridSpec",
    "KITTI_SPEC",
    "LabelGrid",
    "MetricAccumulator",
    "PointCloud",
    "Pose",
    "ProbGrid",
    "Report",
    "SchedulerConfig",
    "StaticClassMask",
    "TALoSAdapter",
    "ToyVoxelModel",
    "ablation",
    "aggregate_pseudo_gt",
    "build_comp_map",
    "emit_bev",
    "pseudo_gt",
    "reliability",
    "relative_pose",
    "run_experiment",
    "transform_cloud",
]
