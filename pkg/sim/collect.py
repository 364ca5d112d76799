# ===========================================
# collect.py
# ===========================================

## \file collect.py
## \brief Collects scene-transition replay buffers from seeded ring-highway scenarios.
##
## \details
## \par Description
##     Each scenario draws a vehicle count and a driver population, spawns a
##     world and lets the agent drive with a rate-calibrated rule-based driver
##     (`agent_lc_rate` lane changes per action step; 0 disables them). Every
##     action step is recorded as an aligned SceneTransition with all
##     participants' actions and rewards labelled.
##
## \par Scenario spec file (key=value, keys mirror ScenarioSpec)
##     vehicles=30,90
##     max_speed=25,35
##     eagerness=0.3,1.0
##     cooperation=0.2,1.0
##     sigma=0.0,0.2
##     driver_lc_rate=0.05
##     calibrated=false
##     episode_steps=200
##     seed=7


from dataclasses import dataclass
from tqdm import tqdm
import numpy as np

from model.errors import ConfigError
from model.scene import FEATURE_WIDTH, BufferMeta, ReplayBuffer, build_transition
from sim.highway import AGENT_ID, DriverMix, DriverParams, DriverProfile, HighwayWorld, SimConfig, observe, step
from pipeline.utils import log


@dataclass(frozen=True)
class ScenarioSpec:
    """!Randomisation ranges of collection and evaluation scenarios."""
    vehicles: tuple[int, ...] = (30, 90)
    max_speed: tuple[float, ...] = (25.0, 35.0)
    eagerness: tuple[float, ...] = (0.3, 1.0)
    cooperation: tuple[float, ...] = (0.2, 1.0)
    sigma: tuple[float, ...] = (0.0, 0.2)
    driver_lc_rate: float = 0.05
    calibrated: bool = False
    episode_steps: int = 200
    seed: int = 7

    def __post_init__(self):
        for name in ("vehicles", "max_speed", "eagerness", "cooperation", "sigma"):
            bounds = getattr(self, name)
            if len(bounds) != 2 or bounds[0] > bounds[1]:
                raise ConfigError(f"ScenarioSpec.{name} must be a 'low,high' pair, got {bounds}")
        if self.vehicles[0] < 1:
            raise ConfigError("Scenarios need at least one vehicle (the agent)")
        if self.episode_steps < 1:
            raise ConfigError("episode_steps must be >= 1")

    def driver_mix(self) -> DriverMix:
        return DriverMix((DriverProfile(1.0, self.max_speed, self.eagerness, self.cooperation, self.sigma,
                                        self.driver_lc_rate, self.calibrated),))


def scenario_rng(seed: int, *key: int) -> np.random.Generator:
    """!Independent generator per (seed, key...) so scenarios do not depend on run order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in key)]))


def agent_driver(cfg: SimConfig, lc_rate: float) -> DriverParams:
    return DriverParams(cfg.agent_max_speed, lane_change_eagerness=1.0, cooperation=0.5, sigma=0.0,
                        lc_rate=lc_rate, calibrated=True)


def collect_dataset(cfg: SimConfig, driver_mix: DriverMix, agent_lc_rate: float, n_transitions: int, seed: int,
                    vehicle_range: tuple = (30, 90), episode_steps: int = 200, progress: bool = True,
                    events: list | None = None) -> ReplayBuffer:
    """!Runs seeded scenarios until `n_transitions` transitions are recorded.

    @param events Optional list receiving every simulator event.

    @throws ValueError If agent_lc_rate is outside [0, 1] or the counts are invalid.
    """
    if not 0.0 <= agent_lc_rate <= 1.0:
        raise ValueError(f"agent_lc_rate must lie in [0, 1], got {agent_lc_rate}")
    if n_transitions < 0 or episode_steps < 1:
        raise ValueError("n_transitions must be >= 0 and episode_steps >= 1")
    lo, hi = int(vehicle_range[0]), int(vehicle_range[1])

    meta = BufferMeta(FEATURE_WIDTH, cfg.sensor_range, cfg.desired_speed, cfg.action_dt, cfg.lanes)
    buffer = ReplayBuffer(meta)
    driver = agent_driver(cfg, agent_lc_rate)

    episode = 0
    bar = tqdm(total=n_transitions, desc="collect", disable=not progress)
    while len(buffer) < n_transitions:
        rng = scenario_rng(seed, episode)
        count = int(rng.integers(lo, hi + 1))
        world = HighwayWorld.spawn(cfg, count, driver_mix, driver, rng)

        s_t = observe(world, AGENT_ID)
        for _ in range(episode_steps):
            world, step_events = step(world, None)
            if events is not None:
                events.extend(step_events)
            s_t1 = observe(world, AGENT_ID)
            buffer.append(build_transition(s_t, s_t1, cfg.desired_speed))
            bar.update(1)
            s_t = s_t1
            if len(buffer) >= n_transitions:
                break
        episode += 1
    bar.close()

    log(f"Collected {len(buffer)} transitions from {episode} scenarios (agent lane-change rate {agent_lc_rate})")
    return buffer
