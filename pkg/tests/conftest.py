import numpy as np
import pytest

from model.scene import BufferMeta, ReplayBuffer, SceneState, VehicleFeatures, build_transition


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def _row(vid, dist, speed, lane, agent_speed, agent_lane):
    return VehicleFeatures(vid, dist, speed - agent_speed, lane - agent_lane, speed, lane)


def random_transition(rng, size=4, t=0.0):
    """Aligned transition of `size` participants with lane moves of at most one lane."""
    lanes = rng.integers(0, 3, size=size)
    speeds = rng.uniform(15.0, 30.0, size=size)
    dists = np.r_[0.0, rng.uniform(-70.0, 70.0, size=size - 1)]
    moves = rng.integers(-1, 2, size=size)
    lanes_t1 = np.clip(lanes + moves, 0, 2)
    speeds_t1 = np.clip(speeds + rng.uniform(-2.0, 2.0, size=size), 0.0, None)

    def state(ls, vs, ds, stamp):
        rows = [VehicleFeatures(0, 0.0, 0.0, 0, float(vs[0]), int(ls[0]), is_agent=True)]
        rows += [_row(i, float(ds[i]), float(vs[i]), int(ls[i]), float(vs[0]), int(ls[0])) for i in range(1, size)]
        return SceneState(tuple(rows), stamp)

    return build_transition(state(lanes, speeds, dists, t), state(lanes_t1, speeds_t1, dists * 0.9, t + 2.0))


@pytest.fixture
def make_transition():
    return random_transition


@pytest.fixture
def small_buffer():
    rng = np.random.default_rng(123)
    transitions = [random_transition(rng, int(rng.integers(1, 6)), 2.0 * i) for i in range(12)]
    return ReplayBuffer(BufferMeta(), transitions)
