"""Sequence sources: SemanticKITTI files and the synthetic street world."""
from .kitti import (
    KittiSequence,
    load_learning_map,
    read_kitti_calib,
    read_kitti_poses,
    read_kitti_scan,
    read_kitti_voxels,
    read_packed_bits,
    write_kitti_calib,
    write_kitti_poses,
    write_kitti_scan,
    write_kitti_voxels,
    write_packed_bits,
)
from .synthetic import (
    Box,
    Cylinder,
    Frame,
    LidarPattern,
    Mover,
    SyntheticSequence,
    SyntheticWorld,
    make_street_world,
    synth_sequence,
)

__all__ = [
    "Box",
    "Cylinder",
    "Frame",
    "KittiSequence",
    "LidarPattern",
    "Mover",
    "SyntheticSequence",
    "SyntheticWorld",
    "load_learning_map",
    "make_street_world",
    "read_kitti_calib",
    "read_kitti_poses",
    "read_kitti_scan",
    "read_kitti_voxels",
    "read_packed_bits",
    "synth_sequence",
    "write_kitti_calib",
    "write_kitti_poses",
    "write_kitti_scan",
    "write_kitti_voxels",
    "write_packed_bits",
]
