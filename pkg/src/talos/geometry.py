"""Rigid transforms, point clouds and line-of-sight voxel traversal."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .voxel_core import GridSpec, RejectedPointError

_ORTHO_TOL = 1e-6
# Two axis crossings closer than this (in segment parameter t) are treated as
# a simultaneous edge/corner crossing; the corner-touching voxels are skipped.
_TIE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("pose contains non-finite values")
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape not in ((4, 4), (3, 4)):
            raise ValueError(f"expected a 3x4 or 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return np.allclose(self.rotation, other.rotation, atol=atol, rtol=0) and np.allclose(
            self.translation, other.translation, atol=atol, rtol=0
        )

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise RejectedPointError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError("intensity length does not match point count")
            object.__setattr__(self, "intensity", inten)

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))


def relative_pose(pose_world_j: Pose, pose_world_i: Pose) -> Pose:
    """Transform taking frame-j coordinates into frame i."""
    return pose_world_i.inverse() @ pose_world_j


def transform_cloud(x: PointCloud, t: Pose) -> PointCloud:
    return PointCloud(t.apply(x.points), x.intensity)


def perturb_pose(t: Pose, sigma: float, rng_seed: int) -> Pose:
    """Add N(0, sigma^2) noise to the intrinsic Z-Y-X Euler angles (radians)
    and to the translation (meters)."""
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return Pose(t.rotation, t.translation)
    rng = np.random.default_rng(rng_seed)
    noise = rng.normal(0.0, sigma, size=6)
    angles = Rotation.from_matrix(t.rotation).as_euler("ZYX")
    rot = Rotation.from_euler("ZYX", angles + noise[:3]).as_matrix()
    # as_matrix is orthonormal to machine precision; polish anyway
    u, _, vt = np.linalg.svd(rot)
    return Pose(u @ vt, t.translation + noise[3:])


def _clip_to_box(start, delta, dims):
    """Slab clip of segments ``start + t*delta``, t in [0, 1], to [0, dims]."""
    n = start.shape[0]
    t0 = np.zeros(n)
    t1 = np.ones(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            d = delta[:, a]
            s = start[:, a]
            lo = (0.0 - s) / d
            hi = (dims[a] - s) / d
            tmin = np.minimum(lo, hi)
            tmax = np.maximum(lo, hi)
            flat = d == 0
            inside = (s >= 0) & (s <= dims[a])
            tmin = np.where(flat, np.where(inside, -np.inf, np.inf), tmin)
            tmax = np.where(flat, np.where(inside, np.inf, -np.inf), tmax)
            t0 = np.maximum(t0, tmin)
            t1 = np.minimum(t1, tmax)
    return t0, t1


def traverse_segments(starts, ends, spec: GridSpec):
    """Voxels crossed by many segments at once (Amanatides-Woo stepping).

    ``starts`` and ``ends`` are ``(N, 3)`` points in voxel units. Each segment
    is clipped to the grid box, then walked from its first in-grid voxel
    until the voxel containing its end point. The start voxel and the end
    voxel are not reported. Simultaneous crossings of two or three planes
    step diagonally, so voxels touched only along an edge or at a corner
    are never reported.

    Returns ``(ray_ids, voxels)``: for each reported voxel the segment index
    and its ``(ix, iy, iz)``. Entries are grouped by step, not by ray.
    """
    starts = np.asarray(starts, dtype=np.float64).reshape(-1, 3)
    ends = np.asarray(ends, dtype=np.float64).reshape(-1, 3)
    dims = np.asarray(spec.dims)
    n = starts.shape[0]
    empty = (np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64))
    if n == 0:
        return empty

    target = np.floor(ends).astype(np.int64)
    origin_vox = np.floor(starts).astype(np.int64)
    delta = ends - starts
    t0, t1 = _clip_to_box(starts, delta, dims)
    alive = t0 < t1

    entry = starts + t0[:, None] * delta
    cur = np.floor(entry).astype(np.int64)
    # entry points on a max face belong to the last voxel
    cur = np.clip(cur, 0, dims - 1)
    # when the start lies inside, its own voxel is the walk's starting voxel
    inside = np.all((starts >= 0) & (starts < dims), axis=1)
    cur[inside] = origin_vox[inside]

    step = np.sign(delta).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.abs(delta)
        boundary = cur + (step > 0)
        t_max = (boundary - starts) / delta
        t_delta = inv
    t_max[step == 0] = np.inf
    t_delta[step == 0] = np.inf

    ray_out = []
    vox_out = []

    # first in-grid voxel counts when the walk starts outside the grid
    first = alive & ~inside & np.any(cur != target, axis=1)
    if first.any():
        ray_out.append(np.nonzero(first)[0])
        vox_out.append(cur[first])

    active = alive & np.any(cur != target, axis=1)
    ids = np.nonzero(active)[0]
    cur = cur[ids]
    t_max = t_max[ids]
    t_delta = t_delta[ids]
    step = step[ids]
    tgt = target[ids]
    limit = int(dims.sum()) + 3
    for _ in range(limit):
        if ids.size == 0:
            break
        tmin = t_max.min(axis=1)
        move = t_max <= (tmin + _TIE_TOL)[:, None]
        cur = cur + np.where(move, step, 0)
        t_max = np.where(move, t_max + t_delta, t_max)
        reached = np.all(cur == tgt, axis=1)
        inb = np.all((cur >= 0) & (cur < dims), axis=1)
        # numeric overshoot past the end point stops the walk
        keep = ~reached & inb & (tmin < 1.0)
        if keep.any():
            ray_out.append(ids[keep])
            vox_out.append(cur[keep])
        ids = ids[keep]
        cur = cur[keep]
        t_max = t_max[keep]
        t_delta = t_delta[keep]
        step = step[keep]
        tgt = tgt[keep]

    if not ray_out:
        return empty
    rays = np.concatenate(ray_out)
    vox = np.concatenate(vox_out)
    not_origin = np.any(vox != origin_vox[rays], axis=1)
    return rays[not_origin], vox[not_origin]


def los_traverse(origin_voxel, target, spec: GridSpec) -> list[tuple[int, int, int]]:
    """Voxels strictly between ``origin_voxel`` (continuous, voxel units) and
    the center of voxel ``target``, in visiting order."""
    tgt = np.asarray(target, dtype=np.int64).reshape(3)
    if not spec.in_bounds(tgt):
        raise IndexError(f"target voxel {tuple(tgt)} is outside the grid {spec.dims}")
    origin = np.asarray(origin_voxel, dtype=np.float64).reshape(1, 3)
    if not np.isfinite(origin).all():
        raise RejectedPointError("non-finite origin")
    _, vox = traverse_segments(origin, tgt[None] + 0.5, spec)
    return [tuple(int(c) for c in v) for v in vox]
