"""SemanticKITTI file formats.

Layout of a sequence directory::

    sequences/NN/velodyne/000000.bin     float32 (x, y, z, reflectance) quadruples
    sequences/NN/voxels/000000.label     uint16 raw class ids, one per voxel
    sequences/NN/voxels/000000.invalid   packed bits, MSB first
    sequences/NN/voxels/000000.bin       packed occupancy bits, MSB first
    sequences/NN/poses.txt               12 floats per line (3x4 camera pose)
    sequences/NN/calib.txt               "Tr: ..." velodyne->camera extrinsic

Voxel files are C-ordered over (x, y, z), z fastest.
"""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np

from ..geometry import PointCloud, Pose
from ..voxel_core import IGNORE, KITTI_SPEC, GridSpec, LabelGrid
from .synthetic import Frame


class FormatError(ValueError):
    pass


def load_learning_map() -> tuple[np.ndarray, np.ndarray]:
    """Lookup tables ``(raw id -> train id, train id -> raw id)``.

    Raw ids missing from the map translate to 255.
    """
    text = resources.files("talos.data").joinpath("kitti_learning_map.json").read_text()
    d = json.loads(text)
    fwd = np.full(1 << 16, IGNORE, dtype=np.uint8)
    for raw, train in d["learning_map"].items():
        fwd[int(raw)] = train
    inv = np.zeros(256, dtype=np.uint16)
    for train, raw in d["learning_map_inv"].items():
        inv[int(train)] = raw
    return fwd, inv


def read_kitti_scan(path) -> PointCloud:
    data = Path(path).read_bytes()
    if len(data) % 16:
        raise FormatError(
            f"{path}: {len(data)} bytes is not a whole number of 16-byte points "
            f"(trailing partial record at byte {len(data) - len(data) % 16})"
        )
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return PointCloud(arr[:, :3].astype(np.float64), arr[:, 3].copy())


def write_kitti_scan(path, cloud: PointCloud):
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    arr = np.empty((len(cloud), 4), dtype="<f4")
    arr[:, :3] = cloud.points
    arr[:, 3] = inten
    Path(path).write_bytes(arr.tobytes())


def _parse_floats(line: str, n: int, where: str) -> np.ndarray:
    try:
        vals = [float(v) for v in line.split()]
    except ValueError as e:
        raise FormatError(f"{where}: {e}") from None
    if len(vals) != n:
        raise FormatError(f"{where}: expected {n} numbers, found {len(vals)}")
    return np.asarray(vals)


def read_kitti_calib(path) -> dict[str, np.ndarray]:
    """Calibration entries as 4x4 homogeneous matrices."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, _, rest = line.partition(":")
        vals = _parse_floats(rest, 12, f"{path}:{lineno}")
        m = np.eye(4)
        m[:3, :4] = vals.reshape(3, 4)
        out[key.strip()] = m
    return out


def read_kitti_poses(poses_path, calib_path) -> list[Pose]:
    """LiDAR-frame world poses ``Tr^-1 @ P @ Tr`` for each camera pose P."""
    calib = read_kitti_calib(calib_path)
    if "Tr" not in calib:
        raise FormatError(f"{calib_path}: no 'Tr' entry")
    tr = calib["Tr"]
    tr_inv = np.linalg.inv(tr)
    poses = []
    for lineno, line in enumerate(Path(poses_path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        p = np.eye(4)
        p[:3, :4] = _parse_floats(line, 12, f"{poses_path}:{lineno}").reshape(3, 4)
        poses.append(Pose.from_matrix(tr_inv @ p @ tr))
    return poses


def _fmt_row(m) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(m)[:3, :4].ravel())


def write_kitti_poses(path, camera_poses):
    Path(path).write_text("".join(_fmt_row(p) + "\n" for p in camera_poses))


def write_kitti_calib(path, tr, extra: dict | None = None):
    rows = dict(extra or {})
    rows["Tr"] = tr
    Path(path).write_text("".join(f"{k}: {_fmt_row(v)}\n" for k, v in rows.items()))


def read_packed_bits(path, n: int) -> np.ndarray:
    data = np.fromfile(path, dtype=np.uint8)
    need = (n + 7) // 8
    if data.size != need:
        raise FormatError(f"{path}: expected {need} bytes of packed bits, found {data.size}")
    return np.unpackbits(data)[:n].astype(bool)


def write_packed_bits(path, bits):
    np.packbits(np.asarray(bits, dtype=bool).ravel()).tofile(path)


def read_kitti_voxels(bin_path, label_path, invalid_path, spec: GridSpec = KITTI_SPEC,
                      learning_map: np.ndarray | None = None) -> LabelGrid:
    """Ground-truth grid: remapped labels, 255 where the invalid bit is set."""
    n = spec.num_voxels
    if bin_path is not None:
        read_packed_bits(bin_path, n)  # size check only
    raw = np.fromfile(label_path, dtype="<u2")
    if raw.size != n:
        raise FormatError(f"{label_path}: expected {n} uint16 labels, found {raw.size}")
    invalid = read_packed_bits(invalid_path, n)
    if learning_map is None:
        learning_map, _ = load_learning_map()
    labels = learning_map[raw]
    labels[invalid] = IGNORE
    return LabelGrid(spec, labels.reshape(spec.dims))


def write_kitti_voxels(grid: LabelGrid, label_path, invalid_path, bin_path=None,
                       occupancy=None, learning_map_inv: np.ndarray | None = None):
    """Inverse of ``read_kitti_voxels``; 255 voxels become invalid with raw id 0."""
    if learning_map_inv is None:
        _, learning_map_inv = load_learning_map()
    vals = grid.values.ravel()
    invalid = vals == IGNORE
    raw = learning_map_inv[np.where(invalid, 0, vals)].astype("<u2")
    raw.tofile(label_path)
    write_packed_bits(invalid_path, invalid)
    if bin_path is not None:
        occ = (vals != 0) & ~invalid if occupancy is None else np.asarray(occupancy).ravel()
        write_packed_bits(bin_path, occ)


class KittiSequence:
    """Sequence source over one SemanticKITTI sequence directory.

    Step ``k + 1`` corresponds to scan ``k``; ground truth is attached when
    ``voxels/<scan>.label`` exists.
    """

    def __init__(self, root, spec: GridSpec = KITTI_SPEC):
        self.root = Path(root)
        self.spec = spec
        self.scans = sorted((self.root / "velodyne").glob("*.bin"))
        self.poses = read_kitti_poses(self.root / "poses.txt", self.root / "calib.txt")
        if len(self.poses) < len(self.scans):
            raise FormatError(f"{self.root}: {len(self.scans)} scans but {len(self.poses)} poses")

    def __len__(self):
        return len(self.scans)

    def __iter__(self) -> Iterator[Frame]:
        vox = self.root / "voxels"
        for k, scan in enumerate(self.scans):
            stem = scan.stem
            gt = None
            if (vox / f"{stem}.label").exists():
                bin_path = vox / f"{stem}.bin"
                gt = read_kitti_voxels(
                    bin_path if bin_path.exists() else None,
                    vox / f"{stem}.label", vox / f"{stem}.invalid", self.spec,
                )
            yield Frame(k + 1, read_kitti_scan(scan), self.poses[int(stem)], gt)
