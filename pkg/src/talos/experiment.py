"""Experiment runner, reports and bird's-eye-view images.

A run streams a sequence through either the frozen pre-trained model
(baseline) or a ``TALoSAdapter`` and accumulates metrics on every step that
carries ground truth.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .data.synthetic import DESK_SPEC, LidarPattern, SyntheticSequence, make_street_world
from .los_supervision import KITTI_CLASS_NAMES
from .metrics import MetricAccumulator
from .model import ToyVoxelModel
from .scheduler import SchedulerConfig, TALoSAdapter
from .voxel_core import EMPTY, IGNORE, GridSpec, LabelGrid

REPORT_SCHEMA = "talos-report"
REPORT_SCHEMA_VERSION = 1

# learning rates for the desk-scale model, picked on worlds 8, 9 and 11 only
DESK_LR_MOMENT = 3e-4
DESK_LR_GRADUAL = 0.003

# Table-1 style ablations: (use_comp, use_sem, use_moment, use_gradual)
ABLATIONS = {
    "A": (True, False, True, False),
    "B": (False, True, True, False),
    "C": (True, True, True, False),
    "D": (True, True, False, True),
    "E": (True, True, True, True),
}


def ablation(name: str, **overrides) -> SchedulerConfig:
    """Scheduler config for one of the A..E ablation rows."""
    try:
        comp, sem, moment, gradual = ABLATIONS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}") from None
    kw = dict(lr_moment=DESK_LR_MOMENT, lr_gradual=DESK_LR_GRADUAL,
              use_comp=comp, use_sem=sem, use_moment=moment, use_gradual=gradual)
    kw.update(overrides)
    return SchedulerConfig(**kw)


@dataclass
class DesktopSetup:
    """Synthetic protocol: pre-train on dense scans of a few street worlds,
    adapt on a sparse scan sequence of an unseen world."""

    spec: GridSpec = DESK_SPEC
    source_seeds: tuple = (1, 2, 3)
    source_steps: int = 12
    source_stride: int = 2
    source_rings: int = 64
    source_azimuths: int = 360
    target_steps: int = 50
    target_rings: int = 16
    target_azimuths: int = 120
    epochs: int = 40
    learning_rate: float = 0.2
    model_seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        d["source_seeds"] = list(self.source_seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DesktopSetup":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown synthetic settings: {sorted(unknown)}")
        if "spec" in d:
            d["spec"] = GridSpec.from_dict(d["spec"])
        if "source_seeds" in d:
            d["source_seeds"] = tuple(d["source_seeds"])
        return cls(**d)

    def source_frames(self) -> list:
        pattern = LidarPattern(rings=self.source_rings, azimuths=self.source_azimuths)
        frames = []
        for seed in self.source_seeds:
            seq = SyntheticSequence(make_street_world(seed), self.spec, self.source_steps, pattern)
            frames += seq.frames()[:: self.source_stride]
        return frames

    def pretrain(self, frames=None) -> ToyVoxelModel:
        frames = self.source_frames() if frames is None else frames
        model = ToyVoxelModel(grid_spec=self.spec, epochs=self.epochs,
                              learning_rate=self.learning_rate, random_state=self.model_seed)
        return model.fit([f.cloud for f in frames], [f.gt for f in frames])

    def target(self, seed: int) -> SyntheticSequence:
        pattern = LidarPattern(rings=self.target_rings, azimuths=self.target_azimuths)
        return SyntheticSequence(make_street_world(seed), self.spec, self.target_steps, pattern)


@dataclass
class Report:
    mode: str
    sequence: str
    ciou: float
    miou: float
    class_iou: dict
    num_frames: int
    num_voxels: int
    step_times: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def playback(self) -> bool:
        return self.mode == "playback"

    def to_dict(self) -> dict:
        excluded = [k for k, v in self.class_iou.items() if v is None]
        times = np.asarray(self.step_times, dtype=np.float64)
        return {
            "schema": REPORT_SCHEMA,
            "schema_version": REPORT_SCHEMA_VERSION,
            "mode": self.mode,
            "playback": self.playback,
            "sequence": self.sequence,
            "metrics": {
                "ciou": self.ciou,
                "miou": self.miou,
                "class_iou": self.class_iou,
                "num_frames": self.num_frames,
                "num_voxels": self.num_voxels,
            },
            "miou_convention": "classes with zero union are excluded from the mean",
            "miou_excluded_classes": excluded,
            "timing": {
                "step_seconds": [float(t) for t in times],
                "mean_step_seconds": float(times.mean()) if times.size else 0.0,
                "total_seconds": float(times.sum()),
            },
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"not a report: schema {d.get('schema')!r}")
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {d.get('schema_version')}")
        m = d["metrics"]
        return cls(d["mode"], d["sequence"], m["ciou"], m["miou"], m["class_iou"],
                   m["num_frames"], m["num_voxels"], d["timing"]["step_seconds"], d.get("config", {}))

    def table(self) -> str:
        def pct(v):
            return "   n/a" if v is None or v != v else f"{100 * v:6.2f}"

        rows = [f"mode: {self.mode}   sequence: {self.sequence}   frames: {self.num_frames}",
                f"{'class':<16}{'IoU %':>8}"]
        rows += [f"{name:<16}{pct(v):>8}" for name, v in self.class_iou.items()]
        rows.append("-" * 24)
        rows.append(f"{'mIoU':<16}{pct(self.miou):>8}")
        rows.append(f"{'cIoU':<16}{pct(self.ciou):>8}")
        if self.step_times:
            rows.append(f"mean step time: {np.mean(self.step_times) * 1000:.1f} ms")
        rows.append("n/a: zero union, left out of mIoU")
        return "\n".join(rows) + "\n"

    def write(self, out_dir, stem: str = "report"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        (out / f"{stem}.txt").write_text(self.table())


def class_names(num_classes: int) -> list[str]:
    if num_classes == len(KITTI_CLASS_NAMES) - 1:
        return list(KITTI_CLASS_NAMES[1:])
    return [f"class_{c}" for c in range(1, num_classes + 1)]


def evaluate_predictions(preds, frames, mode="baseline", sequence="", step_times=(), config=None) -> Report:
    """Report for ``preds`` against the ground truth of ``frames`` (frames
    without ground truth are skipped)."""
    acc = None
    for pred, frame in zip(preds, frames):
        if frame.gt is None:
            continue
        if acc is None:
            acc = MetricAccumulator(frame.gt.spec.num_classes)
        acc.accumulate(pred, frame.gt)
    if acc is None:
        raise ValueError("no frame carries ground truth; nothing to evaluate")
    ious = acc.class_iou()
    names = class_names(acc.num_classes)
    return Report(
        mode=mode,
        sequence=sequence,
        ciou=float(acc.ciou()),
        miou=float(acc.miou()),
        class_iou={n: (None if np.isnan(v) else float(v)) for n, v in zip(names, ious)},
        num_frames=acc.num_frames,
        num_voxels=acc.num_voxels,
        step_times=list(step_times),
        config=config or {},
    )


def run_experiment(config: SchedulerConfig | None, source, model, adapter: TALoSAdapter | None = None,
                   sequence_name: str = "") -> tuple[Report, TALoSAdapter | None]:
    """Stream ``source`` through the frozen ``model`` (``config=None``) or an
    adapter built from ``config``.

    A prepared ``adapter`` (for example one holding a restored gradual
    snapshot for playback) may be passed instead; it is not reset.
    """
    frames = list(source)
    if config is None and adapter is None:
        preds, times = [], []
        for f in frames:
            t = time.perf_counter()
            preds.append(model.predict(f.cloud))
            times.append(time.perf_counter() - t)
        return evaluate_predictions(preds, frames, "baseline", sequence_name, times), None
    if adapter is None:
        adapter = TALoSAdapter.from_config(model, config)
        adapter.reset()
    cfg = adapter.config
    preds = [adapter.step(f.cloud, f.pose, f.step) for f in frames]
    mode = "playback" if cfg.playback else "adapt"
    report = evaluate_predictions(preds, frames, mode, sequence_name, adapter.step_times_, cfg.to_dict())
    return report, adapter


# bird's-eye view

# SemanticKITTI colours (RGB) for the 19 training classes; index 0 is the background
KITTI_PALETTE = np.array([
    [0, 0, 0], [100, 150, 245], [100, 230, 245], [30, 60, 150], [80, 30, 180],
    [0, 0, 255], [255, 30, 30], [255, 40, 200], [150, 30, 90], [255, 0, 255],
    [255, 150, 255], [75, 0, 75], [175, 0, 75], [255, 200, 0], [255, 120, 50],
    [0, 175, 0], [135, 60, 0], [150, 240, 80], [255, 240, 150], [255, 0, 0],
], dtype=np.uint8)


def bev_labels(grid: LabelGrid) -> np.ndarray:
    """``(L, W)`` label of the highest non-empty voxel in each column; 0 for
    columns without one. 255 voxels count as empty."""
    v = grid.values
    occ = (v != EMPTY) & (v != IGNORE)
    h = v.shape[2]
    # index of the topmost occupied voxel, -1 if none
    top = np.where(occ.any(axis=2), h - 1 - np.argmax(occ[:, :, ::-1], axis=2), -1)
    out = np.zeros(v.shape[:2], dtype=np.uint8)
    has = top >= 0
    ix, iy = np.nonzero(has)
    out[ix, iy] = v[ix, iy, top[has]]
    return out


def bev_image(grid: LabelGrid, palette=KITTI_PALETTE) -> Image.Image:
    """RGB image, one pixel per column; image rows run along +x (forward
    at the top), columns along +y (left on the left)."""
    palette = np.asarray(palette, dtype=np.uint8)
    labels = bev_labels(grid)
    if labels.max() >= len(palette):
        raise ValueError(f"palette has {len(palette)} colours but grid uses class {labels.max()}")
    rgb = palette[labels]  # (L, W, 3)
    return Image.fromarray(np.ascontiguousarray(rgb[::-1, ::-1]), mode="RGB")


def emit_bev(grid: LabelGrid, path, palette=KITTI_PALETTE) -> Path:
    """Write the bird's-eye view of ``grid`` as a PNG."""
    path = Path(path)
    bev_image(grid, palette).save(path, format="PNG", optimize=False)
    return path
