"""Binary completion supervision from another moment's point cloud.

Occupied voxels come from static-class points; voxels on the sensor-to-point
line of sight are carved as empty.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, traverse_segments
from .voxel_core import EMPTY, IGNORE, GridSpec, LabelGrid, ProbGrid, points_to_voxels

logger = logging.getLogger(__name__)

# SemanticKITTI training taxonomy (19 classes + empty)
KITTI_CLASS_NAMES = (
    "empty", "car", "bicycle", "motorcycle", "truck", "other-vehicle", "person",
    "bicyclist", "motorcyclist", "road", "parking", "sidewalk", "other-ground",
    "building", "fence", "vegetation", "trunk", "terrain", "pole", "traffic-sign",
)


@dataclass(frozen=True)
class StaticClassMask:
    """Which classes are immovable. Index 0 (empty) is never static."""

    static: tuple[bool, ...]

    def __post_init__(self):
        flags = tuple(bool(s) for s in self.static)
        if not flags:
            raise ValueError("static mask needs at least the empty class")
        if flags[0]:
            raise ValueError("class 0 (empty) cannot be static")
        object.__setattr__(self, "static", flags)

    @classmethod
    def kitti(cls) -> "StaticClassMask":
        """Classes 1-8 (car ... motorcyclist) movable, 9-19 static."""
        return cls(tuple([False] * 9 + [True] * 11))

    @classmethod
    def from_static_classes(cls, num_classes: int, static_classes) -> "StaticClassMask":
        flags = [False] * (num_classes + 1)
        for c in static_classes:
            if not 1 <= c <= num_classes:
                raise ValueError(f"static class {c} outside 1..{num_classes}")
            flags[c] = True
        return cls(tuple(flags))

    @property
    def num_classes(self) -> int:
        return len(self.static) - 1

    @property
    def static_classes(self) -> list[int]:
        return [c for c, s in enumerate(self.static) if s]

    def lookup(self) -> np.ndarray:
        """Boolean table indexable by any uint8 label (255 -> False)."""
        table = np.zeros(256, dtype=bool)
        table[: len(self.static)] = self.static
        return table

    def is_static(self, labels) -> np.ndarray:
        return self.lookup()[np.asarray(labels, dtype=np.uint8)]


def classify_points(x: PointCloud, p_j: ProbGrid) -> np.ndarray:
    """Argmax class of ``p_j`` at each point's voxel; 255 outside the grid."""
    spec = p_j.spec
    idx = points_to_voxels(x.points, spec)
    inb = spec.in_bounds(idx)
    out = np.full(len(x), IGNORE, dtype=np.uint8)
    if inb.any():
        v = idx[inb]
        probs = p_j.values[:, v[:, 0], v[:, 1], v[:, 2]]
        out[inb] = np.argmax(probs, axis=0)
    return out


def build_comp_map(
    x_trans: PointCloud,
    point_classes,
    sensor_origin_i,
    mask: StaticClassMask,
    spec: GridSpec,
) -> LabelGrid:
    """Occupied (1) / carved empty (0) / unknown (255) map in frame i.

    ``x_trans`` holds frame-j points already moved into frame i and
    ``sensor_origin_i`` the frame-j sensor position in frame i. Only points
    of static classes contribute; occupied voxels are never carved.
    """
    classes = np.asarray(point_classes).reshape(-1)
    if classes.shape[0] != len(x_trans):
        raise ValueError(
            f"{len(x_trans)} points but {classes.shape[0]} point classes"
        )
    grid = np.full(spec.dims, IGNORE, dtype=np.uint8)
    if len(x_trans) == 0:
        return LabelGrid(spec, grid)

    n_empty = int(np.count_nonzero(classes == EMPTY))
    if n_empty:
        logger.debug("discarding %d points predicted as empty", n_empty)

    keep = mask.is_static(classes.astype(np.uint8))
    pts = x_trans.points[keep]
    idx = points_to_voxels(pts, spec)
    inb = spec.in_bounds(idx)
    pts = pts[inb]
    idx = idx[inb]
    if pts.shape[0] == 0:
        return LabelGrid(spec, grid)

    origin = spec.to_voxel_units(np.asarray(sensor_origin_i, dtype=np.float64).reshape(1, 3))
    starts = np.repeat(origin, pts.shape[0], axis=0)
    _, carved = traverse_segments(starts, spec.to_voxel_units(pts), spec)
    if carved.shape[0]:
        grid[carved[:, 0], carved[:, 1], carved[:, 2]] = EMPTY
    # occupied wins over carving
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    return LabelGrid(spec, grid)
