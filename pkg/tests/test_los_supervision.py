import numpy as np
import pytest

from talos.geometry import PointCloud, los_traverse
from talos.los_supervision import StaticClassMask, build_comp_map, classify_points
from talos.voxel_core import IGNORE, GridSpec, LabelGrid, ProbGrid

import oracles

SPEC = GridSpec(dims=(10, 10, 4), origin=(0.0, 0.0, 0.0), voxel_size=0.5, num_classes=19)
MASK = StaticClassMask.kitti()
ROAD, CAR, BUILDING = 9, 1, 13


def comp(points, classes, origin=(0.0, 0.0, 0.0), spec=SPEC):
    return build_comp_map(PointCloud(np.reshape(points, (-1, 3))), classes, origin, MASK, spec).values


class TestStaticClassMask:
    def test_kitti_partition(self):
        assert MASK.static_classes == list(range(9, 20))
        assert not MASK.is_static([0, 1, 8, IGNORE]).any()

    def test_empty_never_static(self):
        with pytest.raises(ValueError):
            StaticClassMask((True, False))
        with pytest.raises(ValueError):
            StaticClassMask.from_static_classes(3, [0])


class TestBuildCompMap:
    def test_empty_cloud(self):
        assert np.all(comp(np.zeros((0, 3)), []) == IGNORE)

    def test_single_static_point(self):
        p = np.array([4.1, 2.3, 1.2])
        grid = comp(p, [ROAD])
        v = tuple(np.floor(p / 0.5).astype(int))
        between = set(los_traverse((0.0, 0.0, 0.0), v, SPEC))
        # the oracle's visited set, without the sensor and target voxels
        sampled = set(oracles.sampled_voxels((0.0, 0.0, 0.0), p / 0.5)[1:-1])
        assert between == sampled
        assert grid[v] == 1
        assert {tuple(x) for x in np.argwhere(grid == 0)} == between
        assert np.count_nonzero(grid == IGNORE) == grid.size - len(between) - 1

    def test_movable_point_discarded(self):
        assert np.all(comp([4.1, 2.3, 1.2], [CAR]) == IGNORE)

    def test_empty_class_point_discarded(self):
        assert np.all(comp([4.1, 2.3, 1.2], [0]) == IGNORE)

    def test_occupied_wins(self):
        # the second ray passes straight through the first point's voxel
        grid = comp([[2.2, 0.2, 0.2], [4.7, 0.2, 0.2]], [ROAD, BUILDING])
        assert grid[4, 0, 0] == 1 and grid[9, 0, 0] == 1
        assert list(grid[1:4, 0, 0]) == [0, 0, 0] and list(grid[5:9, 0, 0]) == [0] * 4

    def test_out_of_grid_points_ignored(self):
        assert np.all(comp([20.0, 2.0, 1.0], [ROAD]) == IGNORE)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            comp([[1.0, 1.0, 1.0]], [ROAD, ROAD])

    def test_values_and_determinism(self, rng):
        pts = rng.uniform(0, 5, size=(300, 3)) * [1, 1, 0.4]
        cls = rng.choice([0, CAR, ROAD, BUILDING, IGNORE], size=300)
        a = comp(pts, cls, origin=(-1.0, 2.5, 1.0))
        b = comp(pts, cls, origin=(-1.0, 2.5, 1.0))
        assert np.array_equal(a, b)
        assert set(np.unique(a)) <= {0, 1, IGNORE}
        keep = MASK.is_static(cls)
        occ = np.floor(pts[keep] / 0.5).astype(int)
        assert np.all(a[occ[:, 0], occ[:, 1], occ[:, 2]] == 1)
        assert np.count_nonzero(a == 1) == len({tuple(v) for v in occ})


class TestClassifyPoints:
    def _probs(self, label):
        return ProbGrid.from_labels(LabelGrid(SPEC, np.full(SPEC.dims, label, np.uint8)))

    def test_one_hot(self):
        assert classify_points(PointCloud([[1.0, 1.0, 1.0]]), self._probs(ROAD)).tolist() == [ROAD]

    def test_out_of_bounds(self):
        assert classify_points(PointCloud([[-1.0, 1.0, 1.0]]), self._probs(ROAD)).tolist() == [IGNORE]

    def test_same_voxel_same_class(self, rng):
        lab = rng.integers(0, 20, size=SPEC.dims).astype(np.uint8)
        p = ProbGrid.from_labels(LabelGrid(SPEC, lab))
        out = classify_points(PointCloud([[1.1, 1.1, 1.1], [1.4, 1.2, 1.3]]), p)
        assert out[0] == out[1]
