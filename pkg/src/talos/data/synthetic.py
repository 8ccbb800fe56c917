"""Deterministic street-scene LiDAR simulator with exact voxel ground truth.

World coordinates: x forward along the street, y left, z up. The ground is
the plane ``z = ground_z``; solids are axis-aligned boxes and vertical
cylinders. A spinning LiDAR with a fixed ring/azimuth pattern rides along a
trajectory and returns the first analytic intersection of each ray.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from ..geometry import PointCloud, Pose
from ..voxel_core import EMPTY, GridSpec, LabelGrid

# class ids in the SemanticKITTI training taxonomy
CAR, ROAD, SIDEWALK, BUILDING, FENCE, VEGETATION, TRUNK, POLE = 1, 9, 11, 13, 14, 15, 16, 18

# 20 m x 20 m x 3.2 m forward-looking grid at 0.4 m, desk-scale stand-in
# for the 51.2 m x 51.2 m x 6.4 m SemanticKITTI volume
DESK_SPEC = GridSpec(dims=(48, 48, 8), origin=(0.0, -9.6, -2.0), voxel_size=0.4, num_classes=19)


class Frame(NamedTuple):
    step: int
    cloud: PointCloud
    pose: Pose
    gt: LabelGrid | None


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    cls: int


@dataclass(frozen=True)
class Cylinder:
    center: tuple[float, float]
    radius: float
    z_lo: float
    z_hi: float
    cls: int


@dataclass(frozen=True)
class Mover:
    """Box of ``size`` centred at ``start + step * velocity``."""

    size: tuple[float, float, float]
    start: tuple[float, float, float]
    velocity: tuple[float, float, float]
    cls: int = CAR

    def box_at(self, step: int) -> Box:
        c = np.asarray(self.start) + step * np.asarray(self.velocity)
        h = np.asarray(self.size) / 2.0
        return Box(tuple(c - h), tuple(c + h), self.cls)


@dataclass(frozen=True)
class LidarPattern:
    rings: int = 32
    elevation_min_deg: float = -25.0
    elevation_max_deg: float = 3.0
    azimuths: int = 180
    azimuth_fov_deg: float = 180.0
    max_range: float = 40.0

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, ``(rings * azimuths, 3)``."""
        el = np.deg2rad(np.linspace(self.elevation_min_deg, self.elevation_max_deg, self.rings))
        half = np.deg2rad(self.azimuth_fov_deg) / 2.0
        az = np.linspace(-half, half, self.azimuths, endpoint=self.azimuth_fov_deg < 360)
        el, az = np.meshgrid(el, az, indexing="ij")
        el, az = el.ravel(), az.ravel()
        return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)


@dataclass(frozen=True)
class SyntheticWorld:
    ground_z: float = -1.73
    road_half_width: float = 4.0
    boxes: tuple[Box, ...] = ()
    cylinders: tuple[Cylinder, ...] = ()
    movers: tuple[Mover, ...] = ()
    sensor_start: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sensor_velocity: tuple[float, float, float] = (0.8, 0.0, 0.0)
    sensor_yaw_rate: float = 0.0
    seed: int = 0

    def sensor_pose(self, step: int) -> Pose:
        pos = np.asarray(self.sensor_start) + step * np.asarray(self.sensor_velocity)
        return Pose.from_yaw(step * self.sensor_yaw_rate, pos)

    def solids(self, step: int) -> list:
        return [*self.boxes, *self.cylinders, *(m.box_at(step) for m in self.movers)]

    def ground_class(self, y) -> np.ndarray:
        return np.where(np.abs(y) < self.road_half_width, ROAD, SIDEWALK)

    # declarative file form

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticWorld":
        d = dict(d)
        d["boxes"] = tuple(Box(tuple(b["lo"]), tuple(b["hi"]), b["cls"]) for b in d.get("boxes", ()))
        d["cylinders"] = tuple(
            Cylinder(tuple(c["center"]), c["radius"], c["z_lo"], c["z_hi"], c["cls"])
            for c in d.get("cylinders", ())
        )
        d["movers"] = tuple(
            Mover(tuple(m["size"]), tuple(m["start"]), tuple(m["velocity"]), m.get("cls", CAR))
            for m in d.get("movers", ())
        )
        for key in ("sensor_start", "sensor_velocity"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "SyntheticWorld":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _inside(solid, pts: np.ndarray) -> np.ndarray:
    if isinstance(solid, Box):
        return np.all((pts >= solid.lo) & (pts <= solid.hi), axis=1)
    dx = pts[:, 0] - solid.center[0]
    dy = pts[:, 1] - solid.center[1]
    return (dx * dx + dy * dy <= solid.radius**2) & (pts[:, 2] >= solid.z_lo) & (pts[:, 2] <= solid.z_hi)


def _bounds(solid):
    if isinstance(solid, Box):
        return np.asarray(solid.lo), np.asarray(solid.hi)
    cx, cy = solid.center
    r = solid.radius
    return np.array([cx - r, cy - r, solid.z_lo]), np.array([cx + r, cy + r, solid.z_hi])


def _hit_box(box: Box, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    lo = np.asarray(box.lo)
    hi = np.asarray(box.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    flat = d == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(flat, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(flat, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    ok = (t_near <= t_far) & (t_near > 0)
    return np.where(ok, t_near, np.inf)


def _hit_cylinder(cyl: Cylinder, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    ox = o[:, 0] - cyl.center[0]
    oy = o[:, 1] - cyl.center[1]
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (ox * d[:, 0] + oy * d[:, 1])
    c = ox**2 + oy**2 - cyl.radius**2
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
    z = o[:, 2] + t_side * d[:, 2]
    side_ok = (disc >= 0) & (a > 0) & (t_side > 0) & (z >= cyl.z_lo) & (z <= cyl.z_hi)
    t = np.where(side_ok, t_side, np.inf)
    # top cap, seen from above
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cap = (cyl.z_hi - o[:, 2]) / d[:, 2]
    px = ox + t_cap * d[:, 0]
    py = oy + t_cap * d[:, 1]
    cap_ok = (d[:, 2] < 0) & (t_cap > 0) & (px * px + py * py <= cyl.radius**2)
    return np.minimum(t, np.where(cap_ok, t_cap, np.inf))


def cast_rays(world: SyntheticWorld, step: int, pattern: LidarPattern):
    """World-frame hit points and their classes for one scan."""
    pose = world.sensor_pose(step)
    d = pattern.directions() @ pose.rotation.T
    o = np.broadcast_to(pose.translation, d.shape)
    solids = world.solids(step)
    for s in solids:
        if _inside(s, pose.translation[None])[0]:
            raise ValueError(f"degenerate world: sensor inside a solid at step {step}")
    if pose.translation[2] <= world.ground_z:
        raise ValueError("degenerate world: sensor below the ground")

    best_cls = np.full(d.shape[0], EMPTY, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = (world.ground_z - o[:, 2]) / d[:, 2]
    t_ground = np.where((d[:, 2] < 0) & (t_ground > 0), t_ground, np.inf)
    best_t = t_ground
    is_ground = np.isfinite(best_t)
    for s in solids:
        t = _hit_box(s, o, d) if isinstance(s, Box) else _hit_cylinder(s, o, d)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_cls = np.where(closer, s.cls, best_cls)
        is_ground &= ~closer
    hit = np.isfinite(best_t) & (best_t <= pattern.max_range)
    pts = o[hit] + best_t[hit, None] * d[hit]
    cls = best_cls[hit]
    g = is_ground[hit]
    cls[g] = world.ground_class(pts[g, 1])
    # snap ground returns exactly onto the plane
    pts[g, 2] = world.ground_z
    return pts, cls


def rasterize_gt(world: SyntheticWorld, step: int, spec: GridSpec, subsamples: int = 3) -> LabelGrid:
    """Label each voxel by the majority class of its occupied sub-samples.

    A voxel is empty only if none of its ``subsamples**3`` sample points lies
    inside a solid or below the ground.
    """
    pose = world.sensor_pose(step)
    s = subsamples
    offs = (np.arange(s) + 0.5) / s
    offs = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), axis=-1).reshape(-1, 3)
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in spec.dims], indexing="ij"), axis=-1).reshape(-1, 3)
    local = np.asarray(spec.origin) + (idx[:, None, :] + offs[None]) * spec.voxel_size
    pts = pose.apply(local.reshape(-1, 3))

    cls = np.zeros(pts.shape[0], dtype=np.int64)
    below = pts[:, 2] <= world.ground_z
    cls[below] = world.ground_class(pts[below, 1])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    for solid in world.solids(step):
        s_lo, s_hi = _bounds(solid)
        if np.any(s_hi < lo) or np.any(s_lo > hi):
            continue
        free = cls == EMPTY
        inside = np.zeros_like(free)
        inside[free] = _inside(solid, pts[free])
        cls[inside] = solid.cls

    k = spec.num_channels
    counts = np.bincount(
        np.repeat(np.arange(idx.shape[0]), offs.shape[0]) * k + cls, minlength=idx.shape[0] * k
    ).reshape(idx.shape[0], k)
    counts[:, EMPTY] = 0
    labels = np.where(counts.max(axis=1) > 0, np.argmax(counts, axis=1), EMPTY)
    return LabelGrid(spec, labels.reshape(spec.dims).astype(np.uint8))


def synth_frame(world, step, spec, pattern, with_gt=True) -> Frame:
    pts, _ = cast_rays(world, step, pattern)
    pose = world.sensor_pose(step)
    cloud = PointCloud(pose.inverse().apply(pts), np.ones(pts.shape[0], dtype=np.float32))
    gt = rasterize_gt(world, step, spec) if with_gt else None
    return Frame(step, cloud, pose, gt)


class SyntheticSequence:
    """Iterable sequence source over a synthetic world (steps 1..num_steps)."""

    def __init__(self, world: SyntheticWorld, spec: GridSpec, num_steps: int,
                 pattern: LidarPattern = LidarPattern(), gt_every: int = 1):
        self.world = world
        self.spec = spec
        self.num_steps = num_steps
        self.pattern = pattern
        self.gt_every = gt_every

    def __len__(self):
        return self.num_steps

    def __iter__(self) -> Iterator[Frame]:
        for step in range(1, self.num_steps + 1):
            yield synth_frame(
                self.world, step, self.spec, self.pattern,
                with_gt=self.gt_every > 0 and step % self.gt_every == 0,
            )

    def frames(self) -> list[Frame]:
        return list(self)


def synth_sequence(world: SyntheticWorld, spec: GridSpec, num_steps: int,
                   rays_per_scan: int | None = None, seed: int | None = None,
                   pattern: LidarPattern | None = None) -> SyntheticSequence:
    """Sequence source; ``rays_per_scan`` picks the azimuth count for 32 rings.

    The ray pattern is fixed, so ``seed`` only matters through the world.
    """
    if pattern is None:
        pattern = LidarPattern()
    if rays_per_scan is not None:
        az = rays_per_scan // pattern.rings
        pattern = LidarPattern(
            pattern.rings if az else 0, pattern.elevation_min_deg, pattern.elevation_max_deg,
            max(az, 1) if az else 0, pattern.azimuth_fov_deg, pattern.max_range,
        )
    return SyntheticSequence(world, spec, num_steps, pattern)


def make_street_world(seed: int, length: float = 80.0, sensor_speed: float = 0.8,
                      building_setback: float = 7.0, movers: int = 3,
                      lattice: float | None = 0.4, ground_z: float = -1.62) -> SyntheticWorld:
    """Random street: road, sidewalks, facades with gaps, trees, poles, cars.

    With ``lattice`` set, static geometry is snapped to that voxel pitch
    (faces inset by 2 cm, cylinders centred in voxel columns) so that a grid
    of the same pitch moving by whole voxels sees every static face inside
    a single voxel layer. The default ground height sits 2 cm under a layer
    boundary of ``DESK_SPEC`` for the same reason.
    """
    rng = np.random.default_rng(seed)
    g = ground_z
    inset = 0.02 if lattice else 0.0

    def snap(v):
        return v if not lattice else round(v / lattice) * lattice

    def centre(v):
        return v if not lattice else (np.floor(v / lattice) + 0.5) * lattice

    def box(lo, hi, cls):
        lo = [snap(lo[0]) + inset, snap(lo[1]) + inset, lo[2]]
        hi = [snap(hi[0]) - inset, snap(hi[1]) - inset, hi[2] if not lattice else snap(hi[2]) - inset]
        return Box(tuple(lo), tuple(hi), cls)

    boxes, cyls, movs = [], [], []
    for side in (-1, 1):
        x = -5.0
        while x < length:
            w = rng.uniform(6.0, 15.0)
            depth = rng.uniform(2.0, 4.0)
            y0 = building_setback + rng.uniform(0.0, 1.5)
            ylo, yhi = (y0, y0 + depth) if side > 0 else (-y0 - depth, -y0)
            boxes.append(box((x, ylo, g - 1.0), (x + w, yhi, g + rng.uniform(4.0, 10.0)), BUILDING))
            x += w + rng.uniform(1.5, 6.0)
        x = rng.uniform(0.0, 8.0)
        while x < length:
            kind = rng.integers(3)
            y = side * rng.uniform(4.8, 6.2)
            cx, cy = centre(x), centre(y)
            if kind == 0:
                cyls.append(Cylinder((cx, cy), 0.15, g - 1.0, g + 2.2, TRUNK))
                boxes.append(box((cx - 1.2, cy - 1.2, g + 2.0), (cx + 1.2, cy + 1.2, g + 4.0), VEGETATION))
            elif kind == 1:
                cyls.append(Cylinder((cx, cy), 0.12, g - 1.0, g + 5.0, POLE))
            else:
                # hedges are wide and low, fences one voxel thin and taller
                hl = rng.uniform(1.5, 4.0)
                if rng.random() < 0.5:
                    boxes.append(box((x - hl, cy - 0.6, g - 1.0), (x + hl, cy + 0.6, g + rng.uniform(0.6, 1.0)),
                                     VEGETATION))
                else:
                    boxes.append(box((x - hl, cy - 0.2, g - 1.0), (x + hl, cy + 0.2, g + rng.uniform(1.2, 1.8)),
                                     FENCE))
            x += rng.uniform(5.0, 12.0)
        x = rng.uniform(5.0, 15.0)
        while x < length:
            y = side * 3.2
            boxes.append(box((x - 2.0, y - 0.8, g - 1.0), (x + 2.0, y + 0.8, g + 1.5), CAR))
            x += rng.uniform(10.0, 25.0)
    for m in range(movers):
        lane = 1.7 if m % 2 == 0 else -1.7
        speed = rng.uniform(-1.2, -0.4) if lane > 0 else rng.uniform(0.9, 1.3)
        movs.append(Mover((4.2, 1.8, 1.5), (rng.uniform(10.0, length), lane, g + 0.75), (speed, 0.0, 0.0)))
    return SyntheticWorld(
        ground_z=g, boxes=tuple(boxes), cylinders=tuple(cyls), movers=tuple(movs),
        sensor_velocity=(sensor_speed, 0.0, 0.0), seed=seed,
    )
