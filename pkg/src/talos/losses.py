"""Cross-entropy and Lovasz-softmax losses on probabilities, with analytic
gradients, plus the completion / semantic composites and Adam.

All loss functions take probabilities shaped ``(K, ...)`` and integer targets
shaped ``(...)``; 255 marks voxels without supervision. Gradients have the
shape of the probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .voxel_core import IGNORE, LabelGrid, ProbGrid, check_same_spec

CE_CLAMP = 1e-12


@dataclass(frozen=True)
class LossValue:
    total: float
    ce: float
    lovasz: float
    num_supervised_voxels: int

    @classmethod
    def zero(cls) -> "LossValue":
        return cls(0.0, 0.0, 0.0, 0)

    def __add__(self, other: "LossValue") -> "LossValue":
        return LossValue(
            self.total + other.total,
            self.ce + other.ce,
            self.lovasz + other.lovasz,
            max(self.num_supervised_voxels, other.num_supervised_voxels),
        )


def _unwrap(probs, target):
    if isinstance(probs, ProbGrid):
        probs = probs.values
    if isinstance(target, LabelGrid):
        target = target.values
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target)
    if probs.shape[1:] != target.shape:
        raise ValueError(f"probabilities {probs.shape} do not match target {target.shape}")
    k = probs.shape[0]
    sup = target != IGNORE
    if np.any(target[sup] >= k) or np.any(target[sup] < 0):
        raise ValueError(f"target class outside 0..{k - 1}")
    return probs, target


def ce_loss(probs, target) -> tuple[float, np.ndarray]:
    """Mean ``-log p[target]`` over supervised voxels."""
    probs, target = _unwrap(probs, target)
    k = probs.shape[0]
    flat_p = probs.reshape(k, -1)
    flat_t = target.reshape(-1)
    grad = np.zeros_like(flat_p)
    sup = np.nonzero(flat_t != IGNORE)[0]
    if sup.size == 0:
        return 0.0, grad.reshape(probs.shape)
    cls = flat_t[sup].astype(np.int64)
    picked = flat_p[cls, sup]
    clamped = np.maximum(picked, CE_CLAMP)
    loss = float(-np.log(clamped).mean())
    g = -1.0 / (sup.size * clamped)
    g[picked < CE_CLAMP] = 0.0
    grad[cls, sup] = g
    return loss, grad.reshape(probs.shape)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Lovasz extension weights of the Jaccard loss for sorted ground truth."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if gt_sorted.size > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax_loss(probs, target) -> tuple[float, np.ndarray]:
    """Lovasz-softmax averaged over the classes present in the target."""
    probs, target = _unwrap(probs, target)
    k = probs.shape[0]
    flat_p = probs.reshape(k, -1)
    flat_t = target.reshape(-1)
    grad = np.zeros_like(flat_p)
    sup = np.nonzero(flat_t != IGNORE)[0]
    if sup.size == 0:
        return 0.0, grad.reshape(probs.shape)
    t = flat_t[sup]
    present = np.unique(t)
    total = 0.0
    for c in present:
        fg = (t == c).astype(np.float64)
        pc = flat_p[c, sup]
        errors = np.abs(fg - pc)
        perm = np.argsort(-errors, kind="stable")
        w = lovasz_grad(fg[perm])
        total += float(np.dot(errors[perm], w))
        # d|fg - p|/dp: -1 on foreground, +1 elsewhere (for p in [0, 1])
        sign = np.where(fg - pc >= 0, -1.0, 1.0)
        gc = np.empty(sup.size)
        gc[perm] = w
        grad[c, sup] += sign * gc / present.size
    return total / present.size, grad.reshape(probs.shape)


def _ce_plus_lovasz(probs, target):
    ce, g_ce = ce_loss(probs, target)
    lov, g_lov = lovasz_softmax_loss(probs, target)
    n = int(np.count_nonzero(np.asarray(target) != IGNORE))
    return LossValue(ce + lov, ce, lov, n), g_ce + g_lov


def comp_loss_values(probs: np.ndarray, v_comp: np.ndarray) -> tuple[LossValue, np.ndarray]:
    binary = np.stack([probs[0], probs[1:].max(axis=0)])
    value, g_bin = _ce_plus_lovasz(binary, v_comp)
    grad = np.zeros_like(probs)
    grad[0] = g_bin[0]
    # subgradient of the max: all of it to the first maximal non-empty class
    best = np.argmax(probs[1:], axis=0) + 1
    np.put_along_axis(grad, best[None], g_bin[1][None], axis=0)
    return value, grad


def comp_loss(p_i: ProbGrid, v_comp: LabelGrid) -> tuple[LossValue, np.ndarray]:
    """Completion loss on the binary empty/occupied view of ``p_i``."""
    check_same_spec(p_i, v_comp)
    bad = (v_comp.values > 1) & (v_comp.values != IGNORE)
    if bad.any():
        raise ValueError("completion map must only hold 0, 1 and 255")
    return comp_loss_values(p_i.values, v_comp.values)


def sem_loss_values(probs: np.ndarray, v_sem: np.ndarray) -> tuple[LossValue, np.ndarray]:
    return _ce_plus_lovasz(probs, v_sem)


def sem_loss(p_i: ProbGrid, v_sem: LabelGrid) -> tuple[LossValue, np.ndarray]:
    check_same_spec(p_i, v_sem)
    return sem_loss_values(p_i.values, v_sem.values)


def combined_loss_values(probs, v_comp, v_sem, use_comp=True, use_sem=True):
    value = LossValue.zero()
    grad = np.zeros_like(probs)
    if use_comp and v_comp is not None:
        lv, g = comp_loss_values(probs, v_comp)
        value, grad = value + lv, grad + g
    if use_sem and v_sem is not None:
        lv, g = sem_loss_values(probs, v_sem)
        value, grad = value + lv, grad + g
    return value, grad


def combined_loss(
    p: ProbGrid, v_comp: LabelGrid, v_sem: LabelGrid
) -> tuple[LossValue, np.ndarray]:
    """Completion plus semantic loss on the same prediction."""
    check_same_spec(p, v_comp, v_sem)
    comp, g_comp = comp_loss(p, v_comp)
    sem, g_sem = sem_loss(p, v_sem)
    n = int(np.count_nonzero((v_comp.values != IGNORE) | (v_sem.values != IGNORE)))
    total = LossValue(comp.total + sem.total, comp.ce + sem.ce, comp.lovasz + sem.lovasz, n)
    return total, g_comp + g_sem


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """Bias-corrected Adam update, in place. Non-finite gradients raise
    before anything is modified."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}; step aborted")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name], dtype=np.float64)
            state.v[name] = np.zeros_like(params[name], dtype=np.float64)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state
