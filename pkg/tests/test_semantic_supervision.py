import numpy as np
import pytest

from talos.geometry import Pose
from talos.semantic_supervision import (
    aggregate_pseudo_gt,
    project_labels,
    pseudo_gt,
    reliability,
    reliability_values,
)
from talos.voxel_core import IGNORE, GridSpec, LabelGrid, ProbGrid, SpecMismatchError

import oracles


def grid1(values, num_classes=None):
    v = np.asarray(values, dtype=np.float64).reshape(-1, 1, 1, 1)
    spec = GridSpec(dims=(1, 1, 1), origin=(0, 0, 0), voxel_size=1.0,
                    num_classes=num_classes or v.shape[0] - 1)
    return ProbGrid(spec, v)


def labels(values, spec):
    return LabelGrid(spec, np.asarray(values, np.uint8).reshape(spec.dims))


class TestReliability:
    def test_uniform(self):
        assert reliability(grid1([0.25] * 4)).values.item() == 0.0

    def test_one_hot(self):
        assert reliability(grid1([0, 0, 1.0, 0])).values.item() == 1.0

    def test_two_channel_value(self):
        # frozen from the scalar entropy oracle
        assert reliability(grid1([0.9, 0.1])).values.item() == pytest.approx(0.5310044064107189, abs=1e-12)
        assert oracles.reliability_scalar([0.9, 0.1]) == pytest.approx(0.5310, abs=1e-4)

    def test_random_against_oracle(self, rng):
        p = rng.dirichlet(np.ones(6), size=50)
        got = reliability_values(p.T)
        want = [oracles.reliability_scalar(row) for row in p]
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestPseudoGt:
    def test_tau_zero_one_hot(self):
        spec = GridSpec(dims=(2, 2, 1), origin=(0, 0, 0), voxel_size=1.0, num_classes=3)
        lab = LabelGrid(spec, np.array([0, 1, 2, 3]))
        assert pseudo_gt(ProbGrid.from_labels(lab), 0.0) == lab

    def test_tau_one(self):
        spec = GridSpec(dims=(2, 2, 1), origin=(0, 0, 0), voxel_size=1.0, num_classes=3)
        lab = LabelGrid(spec, np.array([0, 1, 2, 3]))
        assert np.all(pseudo_gt(ProbGrid.from_labels(lab), 1.0).values == IGNORE)

    def test_two_channel(self):
        assert pseudo_gt(grid1([0.9, 0.1]), 0.5).values.item() == 0
        assert pseudo_gt(grid1([0.9, 0.1]), 0.55).values.item() == IGNORE

    def test_strict_threshold(self):
        assert pseudo_gt(grid1([1.0, 0.0]), 1.0).values.item() == IGNORE

    def test_tau_range(self):
        with pytest.raises(ValueError):
            pseudo_gt(grid1([0.5, 0.5]), 1.5)


class TestAggregate:
    SPEC = GridSpec(dims=(3, 1, 1), origin=(0, 0, 0), voxel_size=1.0, num_classes=19)

    def test_rules(self):
        out = aggregate_pseudo_gt(labels([5, IGNORE, 5], self.SPEC), labels([IGNORE, 7, 7], self.SPEC))
        assert out.values.ravel().tolist() == [5, 7, IGNORE]

    def test_agreement(self):
        out = aggregate_pseudo_gt(labels([5, 0, IGNORE], self.SPEC), labels([5, 0, IGNORE], self.SPEC))
        assert out.values.ravel().tolist() == [5, 0, IGNORE]

    def test_spec_mismatch(self):
        other = GridSpec(dims=(3, 1, 1), origin=(0, 0, 0), voxel_size=2.0, num_classes=19)
        with pytest.raises(SpecMismatchError):
            aggregate_pseudo_gt(labels([1, 1, 1], self.SPEC), labels([1, 1, 1], other))


class TestProjectLabels:
    SPEC = GridSpec(dims=(4, 3, 2), origin=(0, 0, 0), voxel_size=0.5, num_classes=19)

    def test_identity(self, rng):
        g = labels(rng.choice([0, 3, 9, IGNORE], size=24), self.SPEC)
        assert project_labels(g, Pose.identity()) == g

    def test_one_voxel_shift(self, rng):
        vals = rng.choice([0, 3, 9, 13], size=self.SPEC.dims).astype(np.uint8)
        out = project_labels(labels(vals, self.SPEC), Pose(translation=(0.5, 0, 0))).values
        assert np.all(out[0] == IGNORE)
        assert np.array_equal(out[1:], vals[:-1])

    def test_all_ignore(self):
        g = LabelGrid.full(self.SPEC)
        assert project_labels(g, Pose(translation=(0.3, 0.1, 0))) == g

    def test_collisions_against_scatter_oracle(self, rng):
        spec = GridSpec(dims=(6, 6, 2), origin=(-1.5, -1.5, 0), voxel_size=0.5, num_classes=19)
        collisions = 0
        for _ in range(20):
            vals = rng.choice([1, 4, 9, 13, IGNORE], size=spec.dims).astype(np.uint8)
            t = Pose.from_yaw(rng.uniform(0, 2 * np.pi), (*rng.uniform(-0.5, 0.5, 2), 0.0))
            got = project_labels(LabelGrid(spec, vals), t).values
            # explicit scatter: nearest transformed center wins, then lowest class
            best = {}
            for src in np.argwhere(vals != IGNORE):
                c = t.apply(np.asarray(spec.origin) + (src + 0.5) * spec.voxel_size)
                u = (c - np.asarray(spec.origin)) / spec.voxel_size
                dst = tuple(np.floor(u).astype(int))
                if not all(0 <= d < n for d, n in zip(dst, spec.dims)):
                    continue
                key = (float(np.sum((u - (np.asarray(dst) + 0.5)) ** 2)), int(vals[tuple(src)]))
                if dst in best:
                    collisions += 1
                best[dst] = min(best.get(dst, key), key)
            want = np.full(spec.dims, IGNORE, np.uint8)
            for dst, (_, lab) in best.items():
                want[dst] = lab
            assert np.array_equal(got, want)
        assert collisions > 0

    def test_out_of_grid_dropped(self):
        g = labels(np.full(24, 9), self.SPEC)
        out = project_labels(g, Pose(translation=(10.0, 0, 0)))
        assert np.all(out.values == IGNORE)
