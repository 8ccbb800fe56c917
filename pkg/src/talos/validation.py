"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numbers

import numpy as np

from .geometry import PointCloud, Pose
from .voxel_core import GridSpec, LabelGrid, ProbGrid


def check_cloud(x) -> PointCloud:
    """Accept a ``PointCloud`` or an ``(N, 3)`` / ``(N, 4)`` array (the fourth
    column is intensity)."""
    if isinstance(x, PointCloud):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] not in (3, 4):
        raise ValueError(f"expected an (N, 3) or (N, 4) point array, got shape {arr.shape}")
    if arr.shape[1] == 4:
        return PointCloud(arr[:, :3], arr[:, 3])
    return PointCloud(arr)


def check_pose(p) -> Pose:
    if isinstance(p, Pose):
        return p
    return Pose.from_matrix(np.asarray(p, dtype=np.float64))


def check_label_grid(y, spec: GridSpec) -> LabelGrid:
    """A ``LabelGrid`` on ``spec`` from a grid or a raw ``spec.dims`` array."""
    if isinstance(y, LabelGrid):
        if y.spec != spec:
            raise ValueError(f"label grid spec {y.spec} does not match {spec}")
        return y
    return LabelGrid(spec, np.asarray(y))


def check_prob_grid(p, spec: GridSpec) -> ProbGrid:
    if isinstance(p, ProbGrid):
        if p.spec != spec:
            raise ValueError(f"probability grid spec {p.spec} does not match {spec}")
        return p
    return ProbGrid(spec, np.asarray(p, dtype=np.float64))


def check_scalar(name: str, value, low=None, high=None, low_open=False, integer=False):
    """Validate a number against optional bounds and return it."""
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise TypeError(f"{name} must be {'an integer' if integer else 'a number'}, got {value!r}")
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value}")
    if low is not None and (value <= low if low_open else value < low):
        raise ValueError(f"{name} must be {'>' if low_open else '>='} {low}, got {value}")
    if high is not None and value > high:
        raise ValueError(f"{name} must be <= {high}, got {value}")
    return value


def check_frames(frames) -> list:
    """Materialize a frame iterable and check strictly increasing steps."""
    frames = list(frames)
    steps = [f.step for f in frames]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError("frame steps must be strictly increasing")
    return frames
