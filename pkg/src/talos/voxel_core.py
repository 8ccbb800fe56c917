"""Voxel grid geometry and the dense label / probability grids.

Grids are stored as numpy arrays shaped ``(L, W, H)`` (labels) and
``(C + 1, L, W, H)`` (probabilities), C-ordered, so flattening matches the
SemanticKITTI voxel file layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IGNORE = 255
EMPTY = 0

# Sentinel returned by point_to_voxel for points outside the grid.
OUT_OF_BOUNDS = None


class RejectedPointError(ValueError):
    """Raised when a point has non-finite coordinates."""


class SpecMismatchError(ValueError):
    """Raised when two grids do not share a GridSpec."""


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, int, int] = (256, 256, 32)
    origin: tuple[float, float, float] = (0.0, -25.6, -2.0)
    voxel_size: float = 0.2
    num_classes: int = 19

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if len(origin) != 3:
            raise ValueError(f"origin must have three coordinates, got {self.origin}")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if int(self.num_classes) < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def num_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def num_channels(self) -> int:
        return self.num_classes + 1

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "origin": list(self.origin),
            "voxel_size": self.voxel_size,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            dims=tuple(d["dims"]),
            origin=tuple(d["origin"]),
            voxel_size=d["voxel_size"],
            num_classes=d["num_classes"],
        )

    def in_bounds(self, idx) -> np.ndarray:
        """Boolean mask of in-bounds rows for an ``(N, 3)`` integer index array."""
        idx = np.asarray(idx)
        dims = np.asarray(self.dims)
        return np.all((idx >= 0) & (idx < dims), axis=-1)

    def voxel_centers(self, idx) -> np.ndarray:
        """Metric centers of ``(N, 3)`` voxel indices."""
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + (idx + 0.5) * self.voxel_size

    def to_voxel_units(self, points) -> np.ndarray:
        """Continuous grid coordinates: voxel (i, j, k) spans [i, i+1) per axis."""
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / self.voxel_size


KITTI_SPEC = GridSpec()


def _readonly(a: np.ndarray) -> np.ndarray:
    v = a.view()
    v.flags.writeable = False
    return v


@dataclass(frozen=True, eq=False)
class LabelGrid:
    spec: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != self.spec.dims:
            if values.size != self.spec.num_voxels:
                raise ValueError(
                    f"label grid needs {self.spec.num_voxels} voxels, got {values.size}"
                )
            values = values.reshape(self.spec.dims)
        values = values.astype(np.uint8, copy=False)
        bad = (values > self.spec.num_classes) & (values != IGNORE)
        if bad.any():
            raise ValueError(f"labels outside 0..{self.spec.num_classes} and 255")
        object.__setattr__(self, "values", _readonly(values))

    @classmethod
    def full(cls, spec: GridSpec, value: int = IGNORE) -> "LabelGrid":
        return cls(spec, np.full(spec.dims, value, dtype=np.uint8))

    def __eq__(self, other):
        if not isinstance(other, LabelGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ProbGrid:
    spec: GridSpec
    values: np.ndarray = field(repr=False)
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        shape = (self.spec.num_channels, *self.spec.dims)
        if values.shape != shape:
            raise ValueError(f"probability grid must be {shape}, got {values.shape}")
        if self.check:
            if values.min(initial=0.0) < 0 or not np.isfinite(values).all():
                raise ValueError("probabilities must be finite and nonnegative")
            if not np.allclose(values.sum(axis=0), 1.0, rtol=0, atol=1e-5):
                raise ValueError("per-voxel probabilities must sum to 1 within 1e-5")
        object.__setattr__(self, "values", _readonly(values))

    @classmethod
    def uniform(cls, spec: GridSpec) -> "ProbGrid":
        return cls(spec, np.full((spec.num_channels, *spec.dims), 1.0 / spec.num_channels))

    @classmethod
    def from_labels(cls, labels: LabelGrid) -> "ProbGrid":
        """One-hot probabilities; ignore voxels become empty."""
        spec = labels.spec
        lab = np.where(labels.values == IGNORE, EMPTY, labels.values)
        onehot = (np.arange(spec.num_channels)[:, None, None, None] == lab[None]).astype(np.float64)
        return cls(spec, onehot)


def check_same_spec(*grids) -> GridSpec:
    spec = grids[0].spec
    for g in grids[1:]:
        if g.spec != spec:
            raise SpecMismatchError(f"grid spec mismatch: {spec} vs {g.spec}")
    return spec


def point_to_voxel(p, spec: GridSpec):
    """Index of the voxel containing ``p``, or ``OUT_OF_BOUNDS``."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,):
        raise ValueError(f"expected a single 3D point, got shape {p.shape}")
    if not np.isfinite(p).all():
        raise RejectedPointError(f"non-finite point {p.tolist()}")
    idx = points_to_voxels(p[None], spec)[0]
    if not spec.in_bounds(idx):
        return OUT_OF_BOUNDS
    return tuple(int(i) for i in idx)


def points_to_voxels(points, spec: GridSpec) -> np.ndarray:
    """Vectorized binning; returns ``(N, 3)`` int64 indices, possibly out of bounds."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(pts).all():
        raise RejectedPointError("point cloud contains non-finite coordinates")
    return np.floor(spec.to_voxel_units(pts)).astype(np.int64)


def voxelize(points, spec: GridSpec) -> np.ndarray:
    """Binary occupancy ``(L, W, H)`` of in-bounds points."""
    occ = np.zeros(spec.dims, dtype=bool)
    idx = points_to_voxels(points, spec)
    idx = idx[spec.in_bounds(idx)]
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return occ


def argmax_labels(p: ProbGrid) -> LabelGrid:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return LabelGrid(p.spec, np.argmax(p.values, axis=0).astype(np.uint8))


def to_binary_completion(p: ProbGrid) -> np.ndarray:
    """``(2, L, W, H)``: empty probability and best non-empty probability.

    The two channels are not renormalized.
    """
    v = p.values
    return np.stack([v[0], v[1:].max(axis=0)])
