"""Entropy-based reliability, confident pseudo labels and cross-moment fusion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from .voxel_core import IGNORE, LabelGrid, ProbGrid, check_same_spec

DEFAULT_TAU = 0.75


@dataclass(frozen=True, eq=False)
class ReliabilityGrid:
    spec: object
    values: np.ndarray = field(repr=False)


def reliability_values(probs: np.ndarray) -> np.ndarray:
    """``1 - H(p) / log(K)`` over axis 0, with ``0 log 0 = 0``."""
    k = probs.shape[0]
    if k < 2:
        return np.ones(probs.shape[1:])
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    ent = -plogp.sum(axis=0)
    r = 1.0 - ent / np.log(k)
    # maximum-entropy rows land within rounding of zero
    r = np.where(np.abs(r) < 1e-12, 0.0, r)
    return np.clip(r, 0.0, 1.0)


def reliability(p: ProbGrid) -> ReliabilityGrid:
    return ReliabilityGrid(p.spec, reliability_values(p.values))


def pseudo_gt_values(probs: np.ndarray, tau: float) -> np.ndarray:
    labels = np.argmax(probs, axis=0).astype(np.uint8)
    labels[~(reliability_values(probs) > tau)] = IGNORE
    return labels


def pseudo_gt(p: ProbGrid, tau: float = DEFAULT_TAU) -> LabelGrid:
    """Argmax label where reliability strictly exceeds ``tau``, else 255."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return LabelGrid(p.spec, pseudo_gt_values(p.values, tau))


def aggregate_values(a_cur: np.ndarray, a_proj: np.ndarray) -> np.ndarray:
    out = a_cur.copy()
    unconfident = a_cur == IGNORE
    out[unconfident] = a_proj[unconfident]
    conflict = ~unconfident & (a_proj != IGNORE) & (a_proj != a_cur)
    out[conflict] = IGNORE
    return out


def aggregate_pseudo_gt(a_cur: LabelGrid, a_proj: LabelGrid) -> LabelGrid:
    """Fill unconfident current voxels from the projected labels; drop
    voxels where both are confident but disagree."""
    spec = check_same_spec(a_cur, a_proj)
    return LabelGrid(spec, aggregate_values(a_cur.values, a_proj.values))


def project_label_values(values: np.ndarray, spec, t: Pose) -> np.ndarray:
    out = np.full(spec.dims, IGNORE, dtype=np.uint8)
    src = np.argwhere(values != IGNORE)
    if src.shape[0] == 0:
        return out
    labels = values[src[:, 0], src[:, 1], src[:, 2]]
    moved = spec.to_voxel_units(t.apply(spec.voxel_centers(src)))
    dst = np.floor(moved).astype(np.int64)
    inb = spec.in_bounds(dst)
    dst, moved, labels = dst[inb], moved[inb], labels[inb]
    if dst.shape[0] == 0:
        return out
    dist = np.sum((moved - (dst + 0.5)) ** 2, axis=1)
    flat = np.ravel_multi_index(dst.T, spec.dims)
    # per destination keep the nearest center, then the lowest class
    order = np.lexsort((labels, dist, flat))
    flat, labels = flat[order], labels[order]
    first = np.ones(flat.shape[0], dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    out.reshape(-1)[flat[first]] = labels[first]
    return out


def project_labels(a: LabelGrid, t: Pose) -> LabelGrid:
    """Scatter labelled voxel centers through ``t``; out-of-grid ones drop."""
    return LabelGrid(a.spec, project_label_values(a.values, a.spec, t))
