"""Command line entry point: ``talos <verb> [options]``.

Verbs: synth, pretrain, evaluate, adapt, playback, bev. Settings come from
an optional JSON config file with ``synthetic``, ``scheduler``, ``ablation``
and ``grid`` sections; flags override the file. Every run writes the
resolved config next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data.kitti import (
    KittiSequence,
    load_learning_map,
    write_kitti_calib,
    write_kitti_poses,
    write_kitti_scan,
    write_kitti_voxels,
)
from .experiment import ABLATIONS, DesktopSetup, ablation, emit_bev, run_experiment
from .model import ToyVoxelModel
from .scheduler import SchedulerConfig, TALoSAdapter
from .voxel_core import KITTI_SPEC, GridSpec

log = logging.getLogger("talos")

DEFAULT_MODEL = "model.npz"
DEFAULT_STATE = "gradual_state.npz"
# grid description written next to exported synthetic sequences
GRID_SIDECAR = "grid.json"


def load_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    unknown = set(cfg) - {"synthetic", "scheduler", "ablation", "grid"}
    if unknown:
        raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
    return cfg


def resolve(args) -> dict:
    """Merge file settings and flag overrides into plain dicts."""
    cfg = load_config(args.config)
    setup = DesktopSetup.from_dict(cfg.get("synthetic", {}))
    sched = ablation(cfg.get("ablation", "E")).to_dict()
    sched.update(cfg.get("scheduler", {}))
    if getattr(args, "ablation", None):
        sched.update(zip(("use_comp", "use_sem", "use_moment", "use_gradual"), ABLATIONS[args.ablation]))
    overrides = {
        "frame_diff": args.frame_diff,
        "iters_per_step": args.iters,
        "tau_reliability": args.tau,
        "lr_moment": args.lr_moment,
        "lr_gradual": args.lr_gradual,
        "pose_noise_sigma": args.pose_noise,
    }
    sched.update({k: v for k, v in overrides.items() if v is not None})
    if args.playback:
        sched["playback"] = True
    scheduler = SchedulerConfig.from_dict(sched)
    grid = GridSpec.from_dict(cfg["grid"]) if "grid" in cfg else None
    return {"synthetic": setup, "scheduler": scheduler, "grid": grid}


def open_sequence(text: str, resolved: dict):
    """``synth:SEED`` or a SemanticKITTI sequence directory.

    A directory without a configured grid uses its ``grid.json`` if present,
    else the SemanticKITTI grid.
    """
    if text.startswith("synth:"):
        try:
            seed = int(text.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad synthetic sequence {text!r}; expected synth:SEED") from None
        return resolved["synthetic"].target(seed)
    spec = resolved["grid"]
    sidecar = Path(text) / GRID_SIDECAR
    if spec is None and sidecar.exists():
        spec = GridSpec.from_dict(json.loads(sidecar.read_text()))
    return KittiSequence(text, spec or KITTI_SPEC)


def get_model(args, resolved: dict) -> ToyVoxelModel:
    if args.model:
        return ToyVoxelModel.load(args.model)
    log.info("no --model given; pre-training on the synthetic source worlds")
    return resolved["synthetic"].pretrain()


def write_resolved(out: Path, resolved: dict, args, extra=None):
    doc = {
        "verb": args.verb,
        "sequence": getattr(args, "sequence", None),
        "model": getattr(args, "model", None),
        "synthetic": resolved["synthetic"].to_dict(),
        "scheduler": resolved["scheduler"].to_dict(),
        "grid": resolved["grid"].to_dict() if resolved["grid"] else None,
    }
    doc.update(extra or {})
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


# verbs

def cmd_synth(args, resolved, out):
    """Write a synthetic sequence in SemanticKITTI layout plus its world file."""
    seq = open_sequence(args.sequence, resolved)
    if not hasattr(seq, "world"):
        raise ValueError("synth needs --sequence synth:SEED")
    seq.world.save(out / "world.json")
    root = out / "sequences" / "00"
    (root / "velodyne").mkdir(parents=True, exist_ok=True)
    (root / "voxels").mkdir(parents=True, exist_ok=True)
    _, inv = load_learning_map()
    poses = []
    for k, frame in enumerate(seq):
        stem = f"{k:06d}"
        write_kitti_scan(root / "velodyne" / f"{stem}.bin", frame.cloud)
        if frame.gt is not None:
            vox = root / "voxels"
            write_kitti_voxels(frame.gt, vox / f"{stem}.label", vox / f"{stem}.invalid",
                               vox / f"{stem}.bin", learning_map_inv=inv)
        poses.append(frame.pose.matrix())
    # identity extrinsic: camera poses equal LiDAR poses
    write_kitti_poses(root / "poses.txt", poses)
    write_kitti_calib(root / "calib.txt", np.eye(4))
    (root / GRID_SIDECAR).write_text(json.dumps(seq.spec.to_dict(), indent=2))
    write_resolved(out, resolved, args, {"written": str(root)})
    log.info("wrote %d frames to %s", len(poses), root)


def cmd_pretrain(args, resolved, out):
    setup = resolved["synthetic"]
    if args.sequence:
        frames = [f for f in open_sequence(args.sequence, resolved) if f.gt is not None]
        spec = frames[0].gt.spec if frames else setup.spec
        model = ToyVoxelModel(grid_spec=spec, epochs=setup.epochs, learning_rate=setup.learning_rate,
                              random_state=setup.model_seed)
        model.fit([f.cloud for f in frames], [f.gt for f in frames])
    else:
        model = setup.pretrain()
    path = out / DEFAULT_MODEL
    model.save(path)
    write_resolved(out, resolved, args, {"model_out": str(path), "loss_history": model.loss_history_})
    log.info("saved model to %s (final training loss %.4f)", path, model.loss_history_[-1])


def _report(args, resolved, out, report, adapter=None):
    report.write(out)
    extra = {}
    if adapter is not None and not adapter.config.playback:
        state = Path(args.snapshot) if args.snapshot else out / DEFAULT_STATE
        adapter.save_state(state)
        extra["state_out"] = str(state)
    write_resolved(out, resolved, args, extra)
    sys.stdout.write(report.table())


def cmd_evaluate(args, resolved, out):
    model = get_model(args, resolved)
    report, _ = run_experiment(None, open_sequence(args.sequence, resolved), model, sequence_name=args.sequence)
    _report(args, resolved, out, report)


def cmd_adapt(args, resolved, out):
    if resolved["scheduler"].playback:
        return cmd_playback(args, resolved, out)
    model = get_model(args, resolved)
    report, adapter = run_experiment(resolved["scheduler"], open_sequence(args.sequence, resolved), model,
                                     sequence_name=args.sequence)
    _report(args, resolved, out, report, adapter)


def cmd_playback(args, resolved, out):
    if not args.snapshot:
        raise ValueError("playback needs --snapshot PATH (a state file written by adapt)")
    cfg = SchedulerConfig.from_dict({**resolved["scheduler"].to_dict(), "playback": True})
    resolved["scheduler"] = cfg
    model = get_model(args, resolved)
    adapter = TALoSAdapter.from_config(model, cfg).reset()
    adapter.restore_state(args.snapshot)
    report, _ = run_experiment(None, open_sequence(args.sequence, resolved), model, adapter=adapter,
                               sequence_name=args.sequence)
    _report(args, resolved, out, report, adapter)


def cmd_bev(args, resolved, out):
    """Bird's-eye views of ground truth and predictions every ``--every`` steps."""
    model = get_model(args, resolved) if (args.model or args.predict or args.adapt) else None
    adapter = None
    if model is not None and args.adapt:
        adapter = TALoSAdapter.from_config(model, resolved["scheduler"]).reset()
    n = 0
    for frame in open_sequence(args.sequence, resolved):
        pred = None
        if adapter is not None:
            pred = adapter.step(frame.cloud, frame.pose, frame.step)
        elif model is not None:
            pred = model.predict(frame.cloud)
        if frame.step % args.every:
            continue
        if frame.gt is not None:
            emit_bev(frame.gt, out / f"gt_{frame.step:06d}.png")
            n += 1
        if pred is not None:
            emit_bev(pred, out / f"pred_{frame.step:06d}.png")
            n += 1
    write_resolved(out, resolved, args, {"images": n})
    log.info("wrote %d images to %s", n, out)


VERBS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "evaluate": cmd_evaluate,
    "adapt": cmd_adapt,
    "playback": cmd_playback,
    "bev": cmd_bev,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--sequence", help="SemanticKITTI sequence directory or synth:SEED")
    common.add_argument("--model", help="model checkpoint (default: pre-train on the synthetic source)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--frame-diff", type=int)
    common.add_argument("--iters", type=int, help="adaptation iterations per step")
    common.add_argument("--tau", type=float, help="reliability threshold for pseudo labels")
    common.add_argument("--lr-moment", type=float)
    common.add_argument("--lr-gradual", type=float)
    common.add_argument("--pose-noise", type=float, help="std of supervision pose noise")
    common.add_argument("--snapshot", help="gradual-model state file (written by adapt, read by playback)")
    common.add_argument("--playback", action="store_true", help="freeze the gradual model")
    common.add_argument("--ablation", choices=sorted(ABLATIONS), help="loss / model switches of one ablation row")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="talos", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    for name, fn in VERBS.items():
        p = sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).splitlines()[0])
        if name == "bev":
            p.add_argument("--every", type=int, default=10, help="image every N steps")
            p.add_argument("--predict", action="store_true", help="also render frozen-model predictions")
            p.add_argument("--adapt", action="store_true", help="render adapted predictions instead")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    needs_sequence = args.verb != "pretrain"
    if needs_sequence and not args.sequence:
        print(f"talos {args.verb}: --sequence is required", file=sys.stderr)
        return 2
    try:
        resolved = resolve(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        VERBS[args.verb](args, resolved, out)
    except (ValueError, OSError) as e:
        print(f"talos {args.verb}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
