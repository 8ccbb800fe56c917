import time

import numpy as np
import pytest
from hypothesis import settings

from talos.data.synthetic import LidarPattern, SyntheticSequence, make_street_world
from talos.experiment import DesktopSetup, ablation, run_experiment
from talos.model import ToyVoxelModel
from talos.scheduler import TALoSAdapter
from talos.voxel_core import GridSpec

settings.register_profile("talos", deadline=None, derandomize=True, max_examples=60)
settings.load_profile("talos")

# held-out target world of the desk protocol (never used for tuning)
TARGET_SEED = 7


class DeskRuns:
    """Lazily computed runs on the held-out synthetic sequence."""

    def __init__(self):
        self.setup = DesktopSetup()
        t = time.perf_counter()
        self.model = self.setup.pretrain()
        self.pretrain_seconds = time.perf_counter() - t
        t = time.perf_counter()
        self.frames = list(self.setup.target(TARGET_SEED))
        self.synth_seconds = time.perf_counter() - t
        self._cache = {}
        self.seconds = {}

    def run(self, name, config=None, adapter=None):
        if name not in self._cache:
            t = time.perf_counter()
            self._cache[name] = run_experiment(config, self.frames, self.model, adapter=adapter,
                                               sequence_name=f"synth:{TARGET_SEED}")
            self.seconds[name] = time.perf_counter() - t
        return self._cache[name]

    def baseline(self):
        return self.run("baseline")[0]

    def ablation(self, row, **kw):
        key = row + "".join(f",{k}={v}" for k, v in sorted(kw.items()))
        return self.run(key, ablation(row, **kw))

    def playback(self):
        _, adapter = self.ablation("E")
        if "playback" not in self._cache:
            snap = adapter.snapshot_gradual()
            pb = TALoSAdapter.from_config(self.model, ablation("E", playback=True)).reset()
            pb.restore_gradual(snap)
            report, pb = self.run("playback", adapter=pb)
            self.playback_snapshots = (snap, pb.snapshot_gradual())
        return self._cache["playback"]


@pytest.fixture(scope="session")
def desk():
    return DeskRuns()


# a small grid and sparse scanner for fast unit tests
SMALL_SPEC = GridSpec(dims=(24, 24, 8), origin=(0.0, -4.8, -2.0), voxel_size=0.4, num_classes=19)
SMALL_PATTERN = LidarPattern(rings=12, azimuths=60)


@pytest.fixture(scope="session")
def small_frames():
    return SyntheticSequence(make_street_world(101), SMALL_SPEC, 6, SMALL_PATTERN).frames()


@pytest.fixture(scope="session")
def small_model(small_frames):
    return ToyVoxelModel(grid_spec=SMALL_SPEC, epochs=10, learning_rate=0.2).fit(
        [f.cloud for f in small_frames], [f.gt for f in small_frames])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one pass/fail line per acceptance criterion, printed in the terminal summary
CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """``record(n, ok, detail)`` for acceptance criterion ``n``."""

    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[CRITERIA][n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(CRITERIA, {})
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
