"""Online dual moment / gradual adaptation over a LiDAR sequence.

At every step a fresh moment model (a copy of the pre-trained parameters)
is adapted on the current scan using supervision from ``frame_diff`` steps
earlier, while a persistent gradual model receives a delayed update: its
prediction for the earlier scan is supervised by the current observation.
The output trusts the gradual model on voxels it labels as static classes
and the moment model everywhere else.
"""
from __future__ import annotations

import io
import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator

from .geometry import PointCloud, Pose, perturb_pose, relative_pose, transform_cloud, traverse_segments
from .los_supervision import StaticClassMask, classify_points
from .losses import AdamState, adam_step, combined_loss_values
from .semantic_supervision import aggregate_values, project_label_values, pseudo_gt_values
from .validation import check_cloud, check_frames, check_pose
from .voxel_core import EMPTY, IGNORE, LabelGrid, ProbGrid, check_same_spec, points_to_voxels

SNAPSHOT_FORMAT = "talos-gradual-snapshot"
STATE_FORMAT = "talos-scheduler-state"
FORMAT_VERSION = 1

KITTI_STATIC = tuple(range(9, 20))


class OutOfOrderStepError(ValueError):
    pass


class BufferMissError(KeyError):
    pass


class SnapshotError(ValueError):
    pass


@dataclass
class SchedulerConfig:
    """Adaptation settings; defaults follow the published SemanticKITTI setup."""

    frame_diff: int = 1
    iters_per_step: int = 3
    gradual_iters: int | None = None
    lr_moment: float = 3e-4
    lr_gradual: float = 3e-5
    tau_reliability: float = 0.75
    static_classes: tuple = KITTI_STATIC
    playback: bool = False
    playback_freeze_moment: bool = False
    pose_noise_sigma: float = 0.0
    use_comp: bool = True
    use_sem: bool = True
    use_moment: bool = True
    use_gradual: bool = True
    stale_graph: bool = False
    seed: int = 0

    def __post_init__(self):
        self.static_classes = tuple(int(c) for c in self.static_classes)
        self.validate()

    def validate(self):
        if self.frame_diff < 0:
            raise ValueError("frame_diff must be >= 0")
        if self.iters_per_step < 0 or (self.gradual_iters is not None and self.gradual_iters < 0):
            raise ValueError("iteration counts must be >= 0")
        if not (self.lr_moment > 0 and self.lr_gradual > 0):
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.tau_reliability <= 1.0:
            raise ValueError("tau_reliability must lie in [0, 1]")
        if self.pose_noise_sigma < 0:
            raise ValueError("pose_noise_sigma must be >= 0")
        if (self.use_moment or self.use_gradual) and not (self.use_comp or self.use_sem):
            raise ValueError("a model is set to adapt but both losses are disabled")

    @property
    def adapts(self) -> bool:
        return self.use_moment or self.use_gradual

    def to_dict(self) -> dict:
        d = asdict(self)
        d["static_classes"] = list(self.static_classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SchedulerConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown scheduler settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BufferRecord:
    step: int
    cloud: PointCloud
    replay: np.ndarray = field(repr=False)
    p_moment: np.ndarray = field(repr=False)
    p_gradual: np.ndarray = field(repr=False)
    pose: Pose = field(repr=False)
    gradual_params: dict = field(repr=False, default_factory=dict)


class AdaptBuffer:
    """Ring of per-step records, evicted oldest first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = capacity
        self._records: deque[BufferRecord] = deque(maxlen=capacity)

    def put(self, record: BufferRecord):
        self._records.append(record)

    def get(self, step: int) -> BufferRecord:
        for r in self._records:
            if r.step == step:
                return r
        raise BufferMissError(step)

    def __contains__(self, step: int) -> bool:
        return any(r.step == step for r in self._records)

    def __len__(self):
        return len(self._records)

    def steps(self) -> list[int]:
        return [r.step for r in self._records]


class LineOfSight:
    """Cached rays from one sensor origin to every point of a cloud.

    Carving only depends on which points are kept, so the traversal is done
    once and comp maps for different point classifications reuse it.
    """

    def __init__(self, points: np.ndarray, sensor_origin, spec):
        self.spec = spec
        idx = points_to_voxels(points, spec)
        inb = spec.in_bounds(idx)
        self.point_ids = np.nonzero(inb)[0]
        self.voxels = idx[inb]
        origin = spec.to_voxel_units(np.asarray(sensor_origin, dtype=np.float64).reshape(1, 3))
        starts = np.repeat(origin, self.point_ids.size, axis=0)
        rays, carved = traverse_segments(starts, spec.to_voxel_units(points[inb]), spec)
        self.ray_point = self.point_ids[rays]
        self.carved_flat = np.ravel_multi_index(carved.T, spec.dims) if carved.size else np.zeros(0, np.int64)
        self.occ_flat = np.ravel_multi_index(self.voxels.T, spec.dims) if self.voxels.size else np.zeros(0, np.int64)

    def comp_map(self, keep_point: np.ndarray) -> np.ndarray:
        grid = np.full(self.spec.num_voxels, IGNORE, dtype=np.uint8)
        grid[self.carved_flat[keep_point[self.ray_point]]] = EMPTY
        grid[self.occ_flat[keep_point[self.point_ids]]] = 1
        return grid.reshape(self.spec.dims)


def agg_values(p_m: np.ndarray, p_g: np.ndarray, mask: StaticClassMask) -> np.ndarray:
    lab_g = np.argmax(p_g, axis=0).astype(np.uint8)
    lab_m = np.argmax(p_m, axis=0).astype(np.uint8)
    return np.where(mask.is_static(lab_g), lab_g, lab_m)


def agg(p_m: ProbGrid, p_g: ProbGrid, mask: StaticClassMask) -> LabelGrid:
    """Gradual-model label where it predicts a static class, else the moment
    model's label (empty is not static)."""
    spec = check_same_spec(p_m, p_g)
    return LabelGrid(spec, agg_values(p_m.values, p_g.values, mask))


def _params_to_bytes(params: dict, header: dict) -> bytes:
    buf = io.BytesIO()
    arrays = {f"param_{k}": np.asarray(v) for k, v in params.items()}
    np.savez(buf, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), np.uint8), **arrays)
    return buf.getvalue()


def _params_from_bytes(data: bytes, expected_format: str) -> tuple[dict, dict]:
    try:
        with np.load(io.BytesIO(data), allow_pickle=False) as z:
            header = json.loads(z["header"].tobytes().decode())
            params = {k[len("param_"):]: z[k].copy() for k in z.files if k.startswith("param_")}
    except Exception as e:  # zip, json and key errors all mean a bad file
        raise SnapshotError(f"corrupt snapshot: {e}") from e
    if header.get("format") != expected_format:
        raise SnapshotError(f"expected a {expected_format} file, got {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {header.get('version')}")
    return header, params


class TALoSAdapter(BaseEstimator):
    """Test-time adapter wrapping a pre-trained SSC model.

    ``step`` consumes one scan and returns that moment's label grid.
    ``fit`` runs a whole sequence and leaves the adapted gradual model in
    ``gradual_model_``; ``transform`` does the same and returns the outputs.
    """

    def __init__(
        self,
        model=None,
        frame_diff=1,
        iters_per_step=3,
        gradual_iters=None,
        lr_moment=3e-4,
        lr_gradual=3e-5,
        tau_reliability=0.75,
        static_classes=KITTI_STATIC,
        playback=False,
        playback_freeze_moment=False,
        pose_noise_sigma=0.0,
        use_comp=True,
        use_sem=True,
        use_moment=True,
        use_gradual=True,
        stale_graph=False,
        seed=0,
    ):
        self.model = model
        self.frame_diff = frame_diff
        self.iters_per_step = iters_per_step
        self.gradual_iters = gradual_iters
        self.lr_moment = lr_moment
        self.lr_gradual = lr_gradual
        self.tau_reliability = tau_reliability
        self.static_classes = static_classes
        self.playback = playback
        self.playback_freeze_moment = playback_freeze_moment
        self.pose_noise_sigma = pose_noise_sigma
        self.use_comp = use_comp
        self.use_sem = use_sem
        self.use_moment = use_moment
        self.use_gradual = use_gradual
        self.stale_graph = stale_graph
        self.seed = seed

    @classmethod
    def from_config(cls, model, config: SchedulerConfig) -> "TALoSAdapter":
        return cls(model=model, **config.to_dict())

    @property
    def config(self) -> SchedulerConfig:
        params = self.get_params(deep=False)
        params.pop("model")
        return SchedulerConfig(**params)

    # lifecycle

    def reset(self, keep_gradual: bool = False):
        """Start a new sequence; optionally keep the current gradual model."""
        cfg = self.config
        if self.model is None:
            raise ValueError("TALoSAdapter needs a fitted SSC model")
        self.config_ = cfg
        self.spec_ = self.model.spec
        self.mask_ = StaticClassMask.from_static_classes(self.spec_.num_classes, cfg.static_classes)
        self.theta0_ = {k: v.copy() for k, v in self.model.get_parameters().items()}
        if not (keep_gradual and hasattr(self, "gradual_model_")):
            self.gradual_model_ = self.model.clone()
            self.gradual_state_ = AdamState(lr=cfg.lr_gradual)
        self.moment_model_ = self.model.clone()
        self.buffer_ = AdaptBuffer(max(cfg.frame_diff + 1, 1))
        self.last_step_ = None
        self.first_step_ = None
        self.step_times_ = []
        self.losses_ = []
        return self

    def _ensure_started(self):
        if not hasattr(self, "buffer_"):
            self.reset()

    def fit(self, frames, y=None):
        self.transform(frames)
        return self

    def transform(self, frames) -> list[LabelGrid]:
        """Run ``step`` over an iterable of frames (objects with ``step``,
        ``cloud`` and ``pose``) from a fresh start."""
        frames = check_frames(frames)
        self.reset(keep_gradual=False)
        return [self.step(f.cloud, f.pose, f.step) for f in frames]

    # snapshots

    def snapshot_gradual(self) -> bytes:
        self._ensure_started()
        header = {"format": SNAPSHOT_FORMAT, "version": FORMAT_VERSION, "spec": self.spec_.to_dict()}
        return _params_to_bytes(self.gradual_model_.get_parameters(), header)

    def restore_gradual(self, snapshot: bytes):
        self._ensure_started()
        header, params = _params_from_bytes(snapshot, SNAPSHOT_FORMAT)
        if header.get("spec") != self.spec_.to_dict():
            raise SnapshotError("snapshot was taken from a model with a different grid spec")
        current = self.gradual_model_.get_parameters()
        if set(params) != set(current) or any(params[k].shape != current[k].shape for k in current):
            raise SnapshotError("snapshot parameters do not match the model")
        self.gradual_model_.set_parameters(params)
        return self

    def save_state(self, path):
        """Gradual parameters, resolved config and step counter."""
        self._ensure_started()
        header = {
            "format": STATE_FORMAT,
            "version": FORMAT_VERSION,
            "spec": self.spec_.to_dict(),
            "config": self.config.to_dict(),
            "last_step": self.last_step_,
        }
        with open(path, "wb") as fh:
            fh.write(_params_to_bytes(self.gradual_model_.get_parameters(), header))

    @staticmethod
    def load_state(path) -> tuple[dict, dict]:
        """``(header, gradual parameters)`` from a state file."""
        with open(path, "rb") as fh:
            return _params_from_bytes(fh.read(), STATE_FORMAT)

    def restore_state(self, path):
        header, params = self.load_state(path)
        snap = _params_to_bytes(
            params, {"format": SNAPSHOT_FORMAT, "version": FORMAT_VERSION, "spec": header["spec"]}
        )
        return self.restore_gradual(snap)

    # the online step

    def _noisy(self, t: Pose, i: int, j: int, branch: int) -> Pose:
        sigma = self.config_.pose_noise_sigma
        if sigma == 0:
            return t
        seed = np.random.SeedSequence([self.config_.seed, i, j, branch]).generate_state(1)[0]
        return perturb_pose(t, sigma, int(seed))

    def _comp_los(self, cloud: PointCloud, t: Pose) -> LineOfSight:
        moved = transform_cloud(cloud, t)
        return LineOfSight(moved.points, t.translation, self.spec_)

    def _point_keep(self, cloud: PointCloud, probs: np.ndarray) -> np.ndarray:
        classes = classify_points(cloud, ProbGrid(self.spec_, probs, check=False))
        return self.mask_.is_static(classes)

    def _update(self, model, state, replay, v_comp, a_proj, params_for_grad=None):
        """One Adam step on ``model``; the prediction is recomputed on ``replay``."""
        cfg = self.config_
        grad_model = model
        if params_for_grad is not None:
            grad_model = model.clone().set_parameters(params_for_grad)
        p = grad_model.predict_proba_replay(replay)
        v_sem = None
        if cfg.use_sem:
            a_cur = pseudo_gt_values(p, cfg.tau_reliability)
            v_sem = a_cur if a_proj is None else aggregate_values(a_cur, a_proj)
        value, g = combined_loss_values(p, v_comp, v_sem, cfg.use_comp, cfg.use_sem)
        adam_step(model.get_parameters(), grad_model.backward(replay, g, p), state)
        return value

    def step(self, cloud: PointCloud, pose: Pose, step: int | None = None) -> LabelGrid:
        self._ensure_started()
        cloud, pose = check_cloud(cloud), check_pose(pose)
        cfg = self.config_
        i = (self.last_step_ + 1 if self.last_step_ is not None else 1) if step is None else int(step)
        if self.last_step_ is not None and i <= self.last_step_:
            raise OutOfOrderStepError(f"step {i} does not follow step {self.last_step_}")
        t_start = time.perf_counter()
        if self.first_step_ is None:
            self.first_step_ = i

        moment = self.moment_model_
        moment.set_parameters({k: v.copy() for k, v in self.theta0_.items()})
        gradual = self.gradual_model_
        replay = self.model.replay(cloud)
        p_m = moment.predict_proba_replay(replay)
        p_g = gradual.predict_proba_replay(replay)
        record = BufferRecord(
            i, cloud, replay, p_m, p_g, pose,
            {k: v.copy() for k, v in gradual.get_parameters().items()},
        )
        self.buffer_.put(record)

        j = i - cfg.frame_diff
        rec_j = None
        if j >= self.first_step_:
            if j not in self.buffer_:
                raise BufferMissError(f"step {i} needs buffered step {j}")
            rec_j = self.buffer_.get(j)

        adapt_moment = cfg.use_moment and not (cfg.playback and cfg.playback_freeze_moment)
        adapt_gradual = cfg.use_gradual and not cfg.playback
        n_m = cfg.iters_per_step
        n_g = cfg.iters_per_step if cfg.gradual_iters is None else cfg.gradual_iters
        losses = {}

        if rec_j is not None and adapt_moment and n_m > 0:
            state = AdamState(lr=cfg.lr_moment)
            v_comp = a_proj = None
            if cfg.frame_diff > 0:
                t_ji = self._noisy(relative_pose(rec_j.pose, pose), i, j, 0)
                if cfg.use_comp:
                    los = self._comp_los(rec_j.cloud, t_ji)
                    v_comp = los.comp_map(self._point_keep(rec_j.cloud, rec_j.p_moment))
                if cfg.use_sem:
                    a_j = pseudo_gt_values(rec_j.p_moment, cfg.tau_reliability)
                    a_proj = project_label_values(a_j, self.spec_, t_ji)
            for _ in range(n_m):
                losses["moment"] = self._update(moment, state, replay, v_comp, a_proj)

        if rec_j is not None and adapt_gradual and n_g > 0:
            los = None
            t_ij = None
            if cfg.frame_diff > 0:
                t_ij = self._noisy(relative_pose(pose, rec_j.pose), i, j, 1)
                if cfg.use_comp:
                    los = self._comp_los(cloud, t_ij)
            stale = rec_j.gradual_params if cfg.stale_graph else None
            for _ in range(n_g):
                v_comp = a_proj = None
                if cfg.frame_diff > 0:
                    p_gi = gradual.predict_proba_replay(replay)
                    if los is not None:
                        v_comp = los.comp_map(self._point_keep(cloud, p_gi))
                    if cfg.use_sem:
                        a_i = pseudo_gt_values(p_gi, cfg.tau_reliability)
                        a_proj = project_label_values(a_i, self.spec_, t_ij)
                losses["gradual"] = self._update(gradual, self.gradual_state_, rec_j.replay,
                                                 v_comp, a_proj, stale)

        if rec_j is not None:
            p_m = moment.predict_proba_replay(replay)
            p_g = gradual.predict_proba_replay(replay)

        if cfg.use_moment and cfg.use_gradual:
            labels = agg_values(p_m, p_g, self.mask_)
        elif cfg.use_gradual:
            labels = np.argmax(p_g, axis=0).astype(np.uint8)
        else:
            labels = np.argmax(p_m, axis=0).astype(np.uint8)

        self.last_step_ = i
        self.last_moment_probs_ = p_m
        self.last_gradual_probs_ = p_g
        self.losses_.append(losses)
        self.step_times_.append(time.perf_counter() - t_start)
        return LabelGrid(self.spec_, labels)
