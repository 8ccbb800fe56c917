"""SSC model contract and a small differentiable voxel model.

Any model plugged into the adapter must provide ``replay``,
``predict_proba_replay``, ``backward``, ``get_parameters``,
``set_parameters`` and ``clone``. ``ToyVoxelModel`` implements them with a
per-voxel softmax-linear classifier over multi-scale occupancy densities.
"""
from __future__ import annotations

import copy
import io
import json
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .geometry import PointCloud, traverse_segments
from .losses import AdamState, adam_step, sem_loss_values
from .validation import check_cloud, check_label_grid
from .voxel_core import GridSpec, LabelGrid, ProbGrid, points_to_voxels, voxelize

CHECKPOINT_FORMAT = "talos-toy-voxel-model"
CHECKPOINT_VERSION = 1


def _densities(grid: np.ndarray, radii) -> list[np.ndarray]:
    out = []
    for r in radii:
        if r == 0:
            out.append(grid)
        else:
            out.append(uniform_filter(grid, size=2 * r + 1, mode="constant", cval=0.0))
    return out


def visibility(points: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(free, occluded)`` masks from the scan's own lines of sight.

    Free voxels lie between the sensor (frame origin) and an in-grid return;
    occluded voxels lie behind a return on the extension of its ray to the
    grid boundary. Voxels holding returns are neither; free wins over
    occluded.
    """
    idx = points_to_voxels(points, spec)
    inb = spec.in_bounds(idx)
    free = np.zeros(spec.dims, dtype=bool)
    occluded = np.zeros(spec.dims, dtype=bool)
    if inb.any():
        hits = spec.to_voxel_units(points[inb])
        origin = spec.to_voxel_units(np.zeros((1, 3)))
        _, vox = traverse_segments(np.repeat(origin, len(hits), axis=0), hits, spec)
        free[vox[:, 0], vox[:, 1], vox[:, 2]] = True
        d = hits - origin
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        far = hits + d * float(np.linalg.norm(spec.dims))
        _, vox = traverse_segments(hits, far, spec)
        occluded[vox[:, 0], vox[:, 1], vox[:, 2]] = True
        hit = idx[inb]
        free[hit[:, 0], hit[:, 1], hit[:, 2]] = False
        occluded[hit[:, 0], hit[:, 1], hit[:, 2]] = False
        occluded &= ~free
    return free, occluded


def occupancy_features(occ: np.ndarray, radii, vis=None, vis_radii=(0, 1),
                       quadratic=False) -> np.ndarray:
    """Cube densities of occupancy, then (optionally) of free and occluded
    space, then ix/L, iy/W, iz/H, then (optionally) the squared offsets of
    those coordinates from the grid centre, scaled to [0, 1]."""
    occ = occ.astype(np.float64)
    dims = occ.shape
    feats = _densities(occ, radii)
    if vis is not None:
        for mask in vis:
            feats += _densities(mask.astype(np.float64), vis_radii)
    for axis, n in enumerate(dims):
        shape = [1, 1, 1]
        shape[axis] = n
        coord = (np.arange(n, dtype=np.float64) / n).reshape(shape)
        feats.append(np.broadcast_to(coord, dims))
    if quadratic:
        for axis, n in enumerate(dims):
            shape = [1, 1, 1]
            shape[axis] = n
            c = (2.0 * (np.arange(n, dtype=np.float64) + 0.5) / n - 1.0) ** 2
            feats.append(np.broadcast_to(c.reshape(shape), dims))
    return np.stack(feats)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=0, keepdims=True)
    return z


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given the gradient w.r.t. softmax outputs."""
    return probs * (grad_probs - np.sum(probs * grad_probs, axis=0, keepdims=True))


class ToyVoxelModel(BaseEstimator):
    """Per-voxel linear softmax over occupancy densities.

    Parameters
    ----------
    grid_spec : GridSpec, optional
        Output grid; defaults to the SemanticKITTI grid.
    radii : tuple of int
        Cube radii (in voxels) of the occupancy density features.
    epochs, learning_rate, random_state : pre-training settings used by ``fit``.
    visibility_radii : tuple of int
        Cube radii of free-space and occluded-space density features, both
        derived from the scan's own lines of sight. An empty tuple disables
        them.
    quadratic_coords : bool
        Add squared centred coordinates, letting the linear model express
        band-shaped spatial priors (a road strip around the sensor path).
        With ``visibility_radii=()`` and ``quadratic_coords=False`` the
        features are exactly the occupancy densities plus ix/L, iy/W, iz/H.
    param_mask : dict, optional
        Boolean arrays per parameter name; False entries are frozen during
        adaptation.
    """

    def __init__(
        self,
        grid_spec=None,
        radii=(0, 1, 2, 4),
        epochs=20,
        learning_rate=0.05,
        random_state=0,
        visibility_radii=(0, 1),
        quadratic_coords=True,
        param_mask=None,
    ):
        self.grid_spec = grid_spec
        self.radii = radii
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.visibility_radii = visibility_radii
        self.quadratic_coords = quadratic_coords
        self.param_mask = param_mask

    @property
    def spec(self) -> GridSpec:
        return self.grid_spec if self.grid_spec is not None else GridSpec()

    @property
    def n_features(self) -> int:
        return len(self.radii) + 2 * len(self.visibility_radii) + (6 if self.quadratic_coords else 3)

    def _check_fitted(self):
        if not hasattr(self, "coef_"):
            raise NotFittedError("ToyVoxelModel is not fitted; call fit() or initialize()")

    def initialize(self, scale: float = 0.01):
        """Small random parameters drawn from ``random_state``."""
        rng = np.random.default_rng(self.random_state)
        k = self.spec.num_channels
        self.coef_ = rng.normal(0.0, scale, size=(k, self.n_features))
        self.intercept_ = np.zeros(k)
        return self

    def fit(self, X, y):
        """Supervised pre-training on clouds ``X`` with ground-truth grids ``y``."""
        X = [check_cloud(x) for x in X]
        y = [check_label_grid(t, self.spec) for t in y]
        if len(X) != len(y):
            raise ValueError(f"{len(X)} clouds but {len(y)} label grids")
        self.initialize()
        pretrain(self, list(zip(X, y)), self.epochs, self.learning_rate, self.random_state)
        return self

    # model contract

    def replay(self, x: PointCloud) -> np.ndarray:
        """Forward-pass input handle: the feature stack of ``x``."""
        x = check_cloud(x)
        occ = voxelize(x.points, self.spec)
        vis = visibility(x.points, self.spec) if self.visibility_radii else None
        return occupancy_features(occ, self.radii, vis, self.visibility_radii, self.quadratic_coords)

    def predict_proba_replay(self, feats: np.ndarray) -> np.ndarray:
        self._check_fitted()
        logits = np.tensordot(self.coef_, feats, axes=(1, 0))
        logits += self.intercept_[:, None, None, None]
        return softmax(logits)

    def backward(self, feats: np.ndarray, grad_out: np.ndarray, probs=None) -> dict:
        """Parameter gradients for an upstream gradient w.r.t. the output
        probabilities of the forward pass on ``feats``."""
        self._check_fitted()
        k = self.spec.num_channels
        if grad_out.shape != (k, *feats.shape[1:]):
            raise ValueError(
                f"output gradient shape {grad_out.shape} does not match {(k, *feats.shape[1:])}"
            )
        if probs is None:
            probs = self.predict_proba_replay(feats)
        dz = softmax_backward(probs, grad_out).reshape(k, -1)
        grads = {
            "coef": dz @ feats.reshape(feats.shape[0], -1).T,
            "intercept": dz.sum(axis=1),
        }
        if self.param_mask is not None:
            for name, m in self.param_mask.items():
                grads[name] = np.where(m, grads[name], 0.0)
        return grads

    def get_parameters(self) -> dict:
        """Live parameter arrays (updates in place affect the model)."""
        self._check_fitted()
        return {"coef": self.coef_, "intercept": self.intercept_}

    def set_parameters(self, params: dict):
        self.coef_ = np.array(params["coef"], dtype=np.float64)
        self.intercept_ = np.array(params["intercept"], dtype=np.float64)
        return self

    def clone(self) -> "ToyVoxelModel":
        """Deep copy, fitted parameters included."""
        return copy.deepcopy(self)

    # estimator-style conveniences

    def predict_proba(self, x: PointCloud) -> ProbGrid:
        return ProbGrid(self.spec, self.predict_proba_replay(self.replay(x)), check=False)

    def predict(self, x: PointCloud) -> LabelGrid:
        return LabelGrid(self.spec, np.argmax(self.predict_proba_replay(self.replay(x)), axis=0))

    # checkpoints

    def to_bytes(self) -> bytes:
        self._check_fitted()
        header = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "spec": self.spec.to_dict(),
            "radii": [int(r) for r in self.radii],
            "visibility_radii": [int(r) for r in self.visibility_radii],
            "quadratic_coords": bool(self.quadratic_coords),
        }
        buf = io.BytesIO()
        np.savez(
            buf,
            header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
            coef=self.coef_,
            intercept=self.intercept_,
        )
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ToyVoxelModel":
        try:
            with np.load(io.BytesIO(data), allow_pickle=False) as z:
                header = json.loads(z["header"].tobytes().decode())
                coef = z["coef"].copy()
                intercept = z["intercept"].copy()
        except (ValueError, KeyError, OSError) as e:
            raise ValueError(f"corrupt model checkpoint: {e}") from e
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a model checkpoint: {header.get('format')!r}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        model = cls(
            grid_spec=GridSpec.from_dict(header["spec"]),
            radii=tuple(header["radii"]),
            visibility_radii=tuple(header.get("visibility_radii", ())),
            quadratic_coords=bool(header.get("quadratic_coords", False)),
        )
        k = model.spec.num_channels
        if coef.shape != (k, model.n_features) or intercept.shape != (k,):
            raise ValueError("checkpoint parameter shapes do not match its grid spec")
        model.coef_ = coef
        model.intercept_ = intercept
        return model

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ToyVoxelModel":
        return cls.from_bytes(Path(path).read_bytes())


def dataset_loss(model, replays, targets) -> float:
    losses = [sem_loss_values(model.predict_proba_replay(f), t.values)[0].total
              for f, t in zip(replays, targets)]
    return float(np.mean(losses))


def pretrain(model, dataset, epochs: int, lr: float, seed: int):
    """Supervised training of ``model`` in place, one Adam step per frame.

    ``dataset`` is a sequence of ``(PointCloud, LabelGrid)`` pairs. Training
    starts from the current parameters (initialized if the model has none).
    Per-epoch training losses are stored in ``model.loss_history_``.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("pre-training needs at least one frame")
    if not hasattr(model, "coef_"):
        model.initialize()
    replays = [model.replay(x) for x, _ in dataset]
    targets = [y for _, y in dataset]
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    history = []
    for _ in range(int(epochs)):
        for idx in rng.permutation(len(dataset)):
            feats = replays[idx]
            probs = model.predict_proba_replay(feats)
            _, g = sem_loss_values(probs, targets[idx].values)
            adam_step(model.get_parameters(), model.backward(feats, g, probs), state)
        history.append(dataset_loss(model, replays, targets))
    model.loss_history_ = history
    return model
