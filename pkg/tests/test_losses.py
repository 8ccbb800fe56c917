import math

import numpy as np
import pytest

from talos.losses import (
    AdamState,
    LossValue,
    adam_step,
    ce_loss,
    combined_loss,
    comp_loss,
    lovasz_softmax_loss,
    sem_loss,
)
from talos.voxel_core import IGNORE, GridSpec, LabelGrid, ProbGrid, SpecMismatchError

import oracles

SPEC = GridSpec(dims=(3, 2, 2), origin=(0, 0, 0), voxel_size=1.0, num_classes=3)


def random_probs(rng, spec=SPEC):
    v = rng.dirichlet(np.ones(spec.num_channels), size=spec.num_voxels).T
    return ProbGrid(spec, v.reshape(spec.num_channels, *spec.dims))


def random_labels(rng, spec=SPEC, high=None, ignore=0.2):
    v = rng.integers(0, high or spec.num_channels, size=spec.dims).astype(np.uint8)
    v[rng.random(spec.dims) < ignore] = IGNORE
    return LabelGrid(spec, v)


class TestCrossEntropy:
    def test_half(self):
        loss, _ = ce_loss(np.array([[0.5], [0.5]]), np.array([0]))
        assert loss == pytest.approx(math.log(2))

    def test_perfect(self):
        loss, _ = ce_loss(np.eye(3), np.arange(3))
        assert loss <= 1e-11

    def test_all_ignored(self, rng):
        loss, g = ce_loss(rng.random((3, 5)), np.full(5, IGNORE))
        assert loss == 0.0 and not g.any()

    def test_clamp(self):
        loss, g = ce_loss(np.array([[0.0], [1.0]]), np.array([0]))
        assert loss == pytest.approx(-math.log(1e-12)) and np.isfinite(g).all()

    def test_class_out_of_range(self):
        with pytest.raises(ValueError):
            ce_loss(np.full((2, 1), 0.5), np.array([2]))

    def test_gradient_rule(self):
        p = np.array([[0.2, 0.6], [0.8, 0.4]])
        _, g = ce_loss(p, np.array([1, IGNORE]))
        np.testing.assert_allclose(g, [[0, 0], [-1 / 0.8, 0]])


class TestLovasz:
    def test_perfect(self):
        loss, g = lovasz_softmax_loss(np.eye(3), np.arange(3))
        assert loss == 0.0

    def test_single_voxel(self):
        loss, _ = lovasz_softmax_loss(np.array([[0.4], [0.6]]), np.array([1]))
        assert loss == pytest.approx(0.4)

    def test_brute_force(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 7))
            p = rng.dirichlet(np.ones(3), size=n).T
            t = rng.integers(0, 3, size=n)
            t[rng.random(n) < 0.2] = IGNORE
            got, _ = lovasz_softmax_loss(p, t)
            assert got == pytest.approx(oracles.lovasz_softmax_brute(p, t), abs=1e-12)

    def test_absent_classes_skipped(self):
        p = np.array([[0.7, 0.1], [0.2, 0.8], [0.1, 0.1]])
        only1, _ = lovasz_softmax_loss(p, np.array([1, 1]))
        assert only1 == pytest.approx(oracles.lovasz_softmax_brute(p, np.array([1, 1])))


class TestCompLoss:
    def test_all_ignored(self, rng):
        value, g = comp_loss(random_probs(rng), LabelGrid.full(SPEC))
        assert value == LossValue.zero() and not g.any()

    def test_matching_one_hot(self, rng):
        lab = rng.integers(0, 4, size=SPEC.dims).astype(np.uint8)
        p = ProbGrid.from_labels(LabelGrid(SPEC, lab))
        value, _ = comp_loss(p, LabelGrid(SPEC, (lab > 0).astype(np.uint8)))
        assert value.lovasz == 0.0 and value.ce < 1e-11

    def test_gradient_routed_to_argmax_channel(self):
        spec = GridSpec(dims=(1, 1, 1), origin=(0, 0, 0), voxel_size=1.0, num_classes=3)
        p = ProbGrid(spec, np.array([0.1, 0.2, 0.6, 0.1]).reshape(4, 1, 1, 1))
        _, g = comp_loss(p, LabelGrid(spec, np.array([1])))
        assert g[1].item() == 0 and g[3].item() == 0 and g[2].item() != 0

    def test_rejects_semantic_labels(self, rng):
        with pytest.raises(ValueError):
            comp_loss(random_probs(rng), LabelGrid(SPEC, np.full(SPEC.dims, 2)))

    def test_spec_mismatch(self, rng):
        other = GridSpec(dims=(3, 2, 2), origin=(1, 0, 0), voxel_size=1.0, num_classes=3)
        with pytest.raises(SpecMismatchError):
            comp_loss(random_probs(rng), LabelGrid.full(other))


class TestSemAndCombined:
    def test_sem_ignored_and_perfect(self, rng):
        assert sem_loss(random_probs(rng), LabelGrid.full(SPEC))[0] == LossValue.zero()
        lab = random_labels(rng, ignore=0)
        value, _ = sem_loss(ProbGrid.from_labels(lab), lab)
        assert value.total < 1e-11

    def test_total_is_sum(self, rng):
        for _ in range(20):
            p = random_probs(rng)
            comp = random_labels(rng, high=2)
            sem = random_labels(rng)
            total, g = combined_loss(p, comp, sem)
            c, gc = comp_loss(p, comp)
            s, gs = sem_loss(p, sem)
            assert total.total == c.total + s.total
            assert total.total == pytest.approx(total.ce + total.lovasz)
            assert np.array_equal(g, gc + gs)

    def test_no_semantic_supervision(self, rng):
        p, comp = random_probs(rng), random_labels(rng, high=2)
        total, _ = combined_loss(p, comp, LabelGrid.full(SPEC))
        assert total.total == comp_loss(p, comp)[0].total

    def test_both_ignored(self, rng):
        total, g = combined_loss(random_probs(rng), LabelGrid.full(SPEC), LabelGrid.full(SPEC))
        assert total.total == 0 and total.num_supervised_voxels == 0 and not g.any()


class TestAdam:
    def test_zero_gradient(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState(lr=0.1)
        adam_step(params, {"w": np.zeros(2)}, state)
        assert np.array_equal(params["w"], [1.0, -2.0]) and state.step == 1

    def test_first_step(self):
        params = {"w": np.array([0.0])}
        adam_step(params, {"w": np.array([1.0])}, AdamState(lr=0.1))
        # bias-corrected first step: m_hat = v_hat = 1
        assert params["w"][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)

    def test_constant_gradient_descends(self):
        params = {"w": np.array([3.0])}
        state = AdamState(lr=0.01)
        trace = []
        for _ in range(50):
            adam_step(params, {"w": np.array([2.0])}, state)
            trace.append(params["w"][0])
        assert np.all(np.diff(trace) < 0)

    def test_non_finite_gradient_leaves_params(self):
        params = {"w": np.array([1.0]), "b": np.array([2.0])}
        state = AdamState(lr=0.1)
        with pytest.raises(FloatingPointError):
            adam_step(params, {"w": np.array([0.5]), "b": np.array([np.nan])}, state)
        assert params["w"][0] == 1.0 and state.step == 0 and not state.m

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(lr=0.1))

    def test_matches_reference_recursion(self, rng):
        w = rng.normal(size=5)
        params = {"w": w.copy()}
        state = AdamState(lr=0.05)
        m = v = np.zeros(5)
        for t in range(1, 20):
            g = rng.normal(size=5)
            adam_step(params, {"w": g}, state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(params["w"], w, rtol=1e-12)
