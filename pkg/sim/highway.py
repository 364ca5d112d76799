# ===========================================
# highway.py
# ===========================================

## \file highway.py
## \brief Ring-highway microsimulator: Krauss car following, rule-based lane changes, safety layer, observation.
##
## \details
## \par Description
##     Vehicles live on a closed ring of `track_length` metres with `lanes`
##     parallel lanes (lane 0 rightmost). State is kept column-wise in numpy
##     arrays indexed by vehicle; the agent is index 0 and id 0.
##
##     One action step (`action_dt`) runs as
##       1. lane-change allowances accrue (rate-calibrated drivers)
##       2. agent action through the safety layer, surrounders decide
##       3. `action_dt / sim_dt` Krauss substeps in the current lanes
##       4. pending lane changes commit in index order, re-checked against
##          the lanes already committed this step
##
## \par Krauss safe speed
##     v_safe = -b*tau + sqrt(b^2*tau^2 + v_leader^2 + 2*b*gap)
##     with b = decel_max, tau = headway and gap the bumper gap minus min_gap.
##     Every substep additionally caps each follower so its bumper gap after
##     the move is at least min_gap, given its leader's new speed.
##
## \par Events
##     lane_change, lane_change_aborted, unsafe_override, collision, wraparound


from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple
import numpy as np
import polars as pl

from model.errors import ConfigError
from model.scene import Action, FeatureScale, SceneState, VehicleFeatures
from pipeline.schema import EVENTS_SCHEMA
from pipeline.utils import safe_vector_cast


AGENT_ID = 0
AGENT_INDEX = 0
MAX_LC_DEBT = 4.0
# share of the speed-gain margin a calibrated driver still demands
CALIBRATED_GAIN_FRACTION = 0.2
SPAWN_SPEED_FRACTION = (0.5, 0.9)


@dataclass(frozen=True)
class SimConfig:
    """!Ring geometry, time steps and kinematic limits.

    @throws ConfigError If a magnitude is not positive or action_dt is not a multiple of sim_dt.
    """
    track_length: float = 1000.0
    lanes: int = 3
    sim_dt: float = 0.5
    action_dt: float = 2.0
    sensor_range: float = 80.0
    accel_max: float = 2.6
    decel_max: float = 4.5
    vehicle_length: float = 4.5
    min_gap: float = 2.0
    headway: float = 0.5
    v_desired: float | None = None
    agent_max_speed: float = 30.0
    lane_change_gain: float = 0.5
    safety: bool = True

    def __post_init__(self):
        positive = ("track_length", "lanes", "sim_dt", "action_dt", "sensor_range", "accel_max",
                    "decel_max", "vehicle_length", "min_gap", "headway", "agent_max_speed")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"SimConfig.{name} must be positive, got {getattr(self, name)}")
        if self.v_desired is not None and self.v_desired <= 0:
            raise ConfigError(f"SimConfig.v_desired must be positive, got {self.v_desired}")
        ratio = self.action_dt / self.sim_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError(f"action_dt {self.action_dt} is not an integer multiple of sim_dt {self.sim_dt}")

    @property
    def substeps(self) -> int:
        return int(round(self.action_dt / self.sim_dt))

    @property
    def desired_speed(self) -> float:
        """!Agent's desired speed, 0.9 x its max speed unless set."""
        return self.v_desired if self.v_desired is not None else 0.9 * self.agent_max_speed

    @property
    def scale(self) -> FeatureScale:
        return FeatureScale(self.sensor_range, self.desired_speed, self.lanes)


@dataclass(frozen=True)
class DriverParams:
    """!Per-driver knobs.

    `lc_rate` caps the expected number of lane changes per action step. A
    `calibrated` driver accepts small speed gains while it holds allowance,
    so its realised rate approaches `lc_rate` when traffic offers enough
    opportunities.
    """
    max_speed: float
    lane_change_eagerness: float = 0.5
    cooperation: float = 0.5
    sigma: float = 0.0
    lc_rate: float = 0.05
    calibrated: bool = False

    def __post_init__(self):
        if self.max_speed <= 0:
            raise ValueError(f"max_speed must be positive, got {self.max_speed}")
        for name in ("lane_change_eagerness", "cooperation", "lc_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class DriverProfile:
    """!One weighted population component; each range is sampled uniformly."""
    weight: float = 1.0
    max_speed: tuple = (25.0, 35.0)
    eagerness: tuple = (0.3, 1.0)
    cooperation: tuple = (0.2, 1.0)
    sigma: tuple = (0.0, 0.2)
    lc_rate: float = 0.05
    calibrated: bool = False

    def sample(self, rng: np.random.Generator) -> DriverParams:
        def draw(bounds):
            lo, hi = bounds
            return float(lo) if hi == lo else float(rng.uniform(lo, hi))

        return DriverParams(
            max_speed=draw(self.max_speed),
            lane_change_eagerness=draw(self.eagerness),
            cooperation=draw(self.cooperation),
            sigma=draw(self.sigma),
            lc_rate=self.lc_rate,
            calibrated=self.calibrated,
        )


@dataclass(frozen=True)
class DriverMix:
    profiles: tuple = field(default_factory=lambda: (DriverProfile(),))

    def __post_init__(self):
        if not self.profiles or any(p.weight < 0 for p in self.profiles) or sum(p.weight for p in self.profiles) <= 0:
            raise ValueError("DriverMix needs at least one profile with positive weight")

    @classmethod
    def homogeneous(cls, rate: float, max_speed: float = 30.0, eagerness: float = 1.0,
                    cooperation: float = 0.5, sigma: float = 0.5) -> "DriverMix":
        """!Identical rate-calibrated drivers, used for lane-change-rate studies.

        Speed noise `sigma` makes drivers close up on each other, which is
        what creates lane-change opportunities among equal desired speeds.
        """
        return cls((DriverProfile(1.0, (max_speed, max_speed), (eagerness, eagerness),
                                  (cooperation, cooperation), (sigma, sigma), rate, True),))

    def sample(self, rng: np.random.Generator) -> DriverParams:
        weights = np.array([p.weight for p in self.profiles], dtype=np.float64)
        k = int(rng.choice(len(self.profiles), p=weights / weights.sum())) if len(self.profiles) > 1 else 0
        return self.profiles[k].sample(rng)


class SimEvent(NamedTuple):
    step: int
    vehicle_id: int
    event: str
    lane_from: int | None = None
    lane_to: int | None = None


class HighwayWorld:
    """!Column-wise state of every vehicle on the ring plus the world clock and generator."""

    def __init__(self, cfg: SimConfig, positions, lanes, speeds, drivers, rng: np.random.Generator):
        n = len(drivers)
        if not (len(positions) == len(lanes) == len(speeds) == n) or n == 0:
            raise ValueError("Vehicle columns must be non-empty and of equal length")

        self.cfg = cfg
        self.rng = rng
        self.drivers = tuple(drivers)
        self.ids = np.arange(n, dtype=np.int64)
        self.pos = np.mod(np.asarray(positions, dtype=np.float64), cfg.track_length)
        self.lane = np.asarray(lanes, dtype=np.int64).copy()
        self.speed = np.asarray(speeds, dtype=np.float64).copy()

        self.max_speed = np.array([d.max_speed for d in drivers], dtype=np.float64)
        self.sigma = np.array([d.sigma for d in drivers], dtype=np.float64)
        self.lc_rate = np.array([d.lc_rate for d in drivers], dtype=np.float64)
        self.lc_debt = np.zeros(n, dtype=np.float64)
        self.lc_target = np.full(n, -1, dtype=np.int64)
        self.lc_timer = np.zeros(n, dtype=np.float64)

        self.step_count = 0
        self.time = 0.0

        if np.any((self.lane < 0) | (self.lane >= cfg.lanes)):
            raise ValueError("Lane index outside the road")
        if np.any(self.speed < 0) or np.any(self.speed > self.max_speed):
            raise ValueError("Initial speeds must lie in [0, max_speed]")

    @classmethod
    def spawn(cls, cfg: SimConfig, n_vehicles: int, driver_mix: DriverMix, agent_driver: DriverParams,
              rng: np.random.Generator) -> "HighwayWorld":
        """!Places the agent and `n_vehicles - 1` surrounders on distinct, well-spaced slots.

        @throws ValueError If the ring cannot hold `n_vehicles` with vehicle_length + min_gap spacing.
        """
        if n_vehicles < 1:
            raise ValueError("A scenario needs at least the agent")
        needed = cfg.vehicle_length + cfg.min_gap
        per_lane = int(np.floor(cfg.track_length / (needed * 1.05)))
        if per_lane * cfg.lanes < n_vehicles:
            raise ValueError(f"{n_vehicles} vehicles do not fit on {cfg.lanes} x {cfg.track_length} m")

        spacing = cfg.track_length / per_lane
        slack = max(spacing - needed * 1.05, 0.0)
        slots = rng.choice(per_lane * cfg.lanes, size=n_vehicles, replace=False)
        lanes = slots % cfg.lanes
        positions = (slots // cfg.lanes) * spacing + rng.uniform(0.0, slack, size=n_vehicles)

        drivers = [agent_driver] + [driver_mix.sample(rng) for _ in range(n_vehicles - 1)]
        fractions = rng.uniform(*SPAWN_SPEED_FRACTION, size=n_vehicles)
        speeds = fractions * np.array([d.max_speed for d in drivers])
        return cls(cfg, positions, lanes, speeds, drivers, rng)

    @property
    def size(self) -> int:
        return len(self.ids)

    def index_of(self, vehicle_id: int) -> int:
        hits = np.flatnonzero(self.ids == vehicle_id)
        if len(hits) == 0:
            raise KeyError(f"No vehicle with id {vehicle_id}")
        return int(hits[0])


def safe_speed(v_leader, gap, decel: float, headway: float):
    """!Krauss safe speed; works on scalars and arrays, infinite gap gives infinity."""
    bt = decel * headway
    return -bt + np.sqrt(bt * bt + np.square(v_leader) + 2.0 * decel * gap)


def krauss_speed(v: float, v_leader: float, gap: float, cfg: SimConfig, driver: DriverParams,
                 rng: np.random.Generator | None = None) -> float:
    """!Next speed of a follower one sim step ahead.

    @param gap Usable gap to the leader (bumper gap minus min_gap), metres.
    @param rng Source of the speed noise; without it the update is noise-free.

    @throws ValueError If the gap is negative (the caller reports a collision).
    """
    if gap < 0:
        raise ValueError(f"Negative gap {gap}")
    v_safe = float(safe_speed(v_leader, gap, cfg.decel_max, cfg.headway))
    v_next = min(v + cfg.accel_max * cfg.sim_dt, driver.max_speed, v_safe)
    if rng is not None and driver.sigma > 0:
        v_next -= rng.uniform(0.0, driver.sigma * cfg.accel_max * cfg.sim_dt)
    return max(v_next, 0.0)


def _lane_neighbors(world: HighwayWorld, i: int, lane: int) -> tuple:
    """!Closest vehicle ahead and behind `i` in `lane`, with bumper gaps (inf when alone)."""
    others = np.flatnonzero((world.lane == lane) & (world.ids != world.ids[i]))
    if len(others) == 0:
        return -1, np.inf, -1, np.inf
    L = world.cfg.track_length
    ahead = np.mod(world.pos[others] - world.pos[i], L)
    behind = np.mod(world.pos[i] - world.pos[others], L)
    k_lead, k_follow = int(np.argmin(ahead)), int(np.argmin(behind))
    length = world.cfg.vehicle_length
    return int(others[k_lead]), ahead[k_lead] - length, int(others[k_follow]), behind[k_follow] - length


def _leaders(world: HighwayWorld) -> tuple:
    """!Same-lane leader index of every vehicle (-1 when alone in its lane) and centre distance to it."""
    n = world.size
    order = np.lexsort((world.ids, world.pos, world.lane))
    lanes_sorted = world.lane[order]
    starts = np.flatnonzero(np.r_[True, lanes_sorted[1:] != lanes_sorted[:-1]])
    ends = np.r_[starts[1:], n] - 1

    leader_sorted = np.roll(order, -1)
    leader_sorted[ends] = order[starts]
    leader = np.empty(n, dtype=np.int64)
    leader[order] = leader_sorted
    leader[leader == np.arange(n)] = -1

    dist = np.full(n, np.inf)
    has = leader >= 0
    dist[has] = np.mod(world.pos[leader[has]] - world.pos[has], world.cfg.track_length)
    return leader, dist


def _prospective_speed(world: HighwayWorld, i: int, lane: int) -> float:
    cfg = world.cfg
    lead, gap, _, _ = _lane_neighbors(world, i, lane)
    if lead < 0:
        return float(world.max_speed[i])
    usable = max(gap - cfg.min_gap, 0.0)
    return float(min(world.max_speed[i], safe_speed(world.speed[lead], usable, cfg.decel_max, cfg.headway)))


def _target_lane(world: HighwayWorld, i: int, action: Action) -> int:
    if action == Action.LEFT:
        return int(world.lane[i]) + 1
    if action == Action.RIGHT:
        return int(world.lane[i]) - 1
    return int(world.lane[i])


def _gaps_clear(world: HighwayWorld, i: int, lane: int) -> bool:
    _, gap_ahead, _, gap_behind = _lane_neighbors(world, i, lane)
    return gap_ahead > world.cfg.min_gap and gap_behind > world.cfg.min_gap


def safety_check(world: HighwayWorld, i: int, action) -> Action:
    """!Replaces an unsafe or off-road lane change by KEEP.

    A change is safe when the target lane exists, both bumper gaps in it exceed
    min_gap, and the new follower's safe speed behind the moving vehicle stays
    at or above its current speed minus decel_max * action_dt.

    @throws ValueError If the action is not keep, left or right.
    """
    action = Action(int(action))
    if action == Action.INVALID:
        raise ValueError("safety_check needs keep, left or right")
    if action == Action.KEEP:
        return Action.KEEP

    cfg = world.cfg
    target = _target_lane(world, i, action)
    if not 0 <= target < cfg.lanes:
        return Action.KEEP
    if not cfg.safety:
        return action

    _, gap_ahead, follower, gap_behind = _lane_neighbors(world, i, target)
    if gap_ahead <= cfg.min_gap or gap_behind <= cfg.min_gap:
        return Action.KEEP
    if follower >= 0:
        v_follow_safe = safe_speed(world.speed[i], gap_behind - cfg.min_gap, cfg.decel_max, cfg.headway)
        if v_follow_safe < world.speed[follower] - cfg.decel_max * cfg.action_dt:
            return Action.KEEP
    return action


def rule_based_lane_decision(world: HighwayWorld, i: int, rng: np.random.Generator,
                             ignore_rate: bool = False) -> Action:
    """!Speed-gain lane changer with a rate allowance.

    A driver may only change while it holds lane-change allowance (accrued at
    `lc_rate` per action step) unless `ignore_rate` is set. It then takes the
    safe adjacent lane with the largest prospective speed when the gain over
    its current lane exceeds `lane_change_gain / eagerness`. A calibrated
    driver spending allowance only needs `CALIBRATED_GAIN_FRACTION` of that
    margin, but never changes without a gain. The new follower must also be
    left `cooperation * v_follower * headway` beyond min_gap.
    """
    driver = world.drivers[i]
    eagerness = driver.lane_change_eagerness
    if eagerness <= 0.0:
        return Action.KEEP
    if not ignore_rate and (driver.lc_rate <= 0.0 or world.lc_debt[i] <= 0.0):
        return Action.KEEP

    cfg = world.cfg
    current = _prospective_speed(world, i, int(world.lane[i]))
    candidates = []
    for action in (Action.LEFT, Action.RIGHT):
        if safety_check(world, i, action) != action:
            continue
        target = _target_lane(world, i, action)
        _, _, follower, gap_behind = _lane_neighbors(world, i, target)
        if follower >= 0:
            courtesy = cfg.min_gap + driver.cooperation * world.speed[follower] * cfg.headway
            if gap_behind <= courtesy:
                continue
        candidates.append((_prospective_speed(world, i, target) - current, action))

    if not candidates:
        return Action.KEEP
    # stable max keeps LEFT ahead of RIGHT on ties
    gain, action = max(candidates, key=lambda c: c[0])
    margin = cfg.lane_change_gain / eagerness
    if driver.calibrated and not ignore_rate:
        margin *= CALIBRATED_GAIN_FRACTION
    return action if gain > margin else Action.KEEP


def _advance(world: HighwayWorld, events: list):
    """!One Krauss substep for all vehicles in their current lanes."""
    cfg = world.cfg
    dt = cfg.sim_dt
    leader, dist = _leaders(world)
    has = leader >= 0

    gap = dist - cfg.vehicle_length
    for j in np.flatnonzero(has & (gap < 0)):
        events.append(SimEvent(world.step_count, int(world.ids[j]), "collision", int(world.lane[j]), int(world.lane[j])))

    usable = np.where(has, np.maximum(gap - cfg.min_gap, 0.0), np.inf)
    v_leader = np.where(has, world.speed[np.maximum(leader, 0)], 0.0)
    v_safe = safe_speed(v_leader, usable, cfg.decel_max, cfg.headway)
    v_next = np.minimum(np.minimum(world.speed + cfg.accel_max * dt, world.max_speed), v_safe)

    noise = world.rng.uniform(0.0, 1.0, size=world.size) * world.sigma * cfg.accel_max * dt
    v_next = np.maximum(v_next - noise, 0.0)

    # no-overrun cap: bumper gap after the move stays >= min_gap
    room = np.where(has, (gap - cfg.min_gap) / dt, np.inf)
    for _ in range(world.size + 1):
        cap = np.maximum(room + np.where(has, v_next[np.maximum(leader, 0)], 0.0), 0.0)
        over = v_next > cap
        if not over.any():
            break
        v_next = np.where(over, cap, v_next)
    else:
        while True:
            cap = np.maximum(room + np.where(has, v_next[np.maximum(leader, 0)], 0.0), 0.0)
            over = v_next > cap
            if not over.any():
                break
            v_next[over] = 0.0

    new_pos = world.pos + v_next * dt
    for j in np.flatnonzero(new_pos >= cfg.track_length):
        events.append(SimEvent(world.step_count, int(world.ids[j]), "wraparound", int(world.lane[j]), int(world.lane[j])))
    world.pos = np.mod(new_pos, cfg.track_length)
    world.speed = v_next
    world.time += dt
    world.lc_timer = np.maximum(world.lc_timer - dt, 0.0)


def step(world: HighwayWorld, agent_action=None) -> tuple:
    """!Advances the world by one action step in place.

    @param agent_action Requested agent action; None lets the agent's own
           rule-based driver decide (dataset collection).

    @return `(world, events)`.
    """
    cfg = world.cfg
    rng = world.rng
    events = []
    n = world.size

    accrue = rng.random(n) < world.lc_rate
    world.lc_debt = np.minimum(world.lc_debt + accrue, MAX_LC_DEBT)

    world.lc_target[:] = -1
    for i in range(n):
        if i == AGENT_INDEX and agent_action is not None:
            requested = Action(int(agent_action))
            action = safety_check(world, i, requested)
            if action != requested:
                events.append(SimEvent(world.step_count, int(world.ids[i]), "unsafe_override",
                                       int(world.lane[i]), _target_lane(world, i, requested)))
        else:
            action = rule_based_lane_decision(world, i, rng)
        if action.is_lane_change:
            world.lc_target[i] = _target_lane(world, i, action)
            world.lc_timer[i] = cfg.action_dt

    for _ in range(cfg.substeps):
        _advance(world, events)

    for i in np.flatnonzero(world.lc_target >= 0):
        source, target = int(world.lane[i]), int(world.lc_target[i])
        if _gaps_clear(world, i, target):
            world.lane[i] = target
            world.lc_debt[i] = max(world.lc_debt[i] - 1.0, 0.0)
            events.append(SimEvent(world.step_count, int(world.ids[i]), "lane_change", source, target))
        else:
            events.append(SimEvent(world.step_count, int(world.ids[i]), "lane_change_aborted", source, target))
    world.lc_target[:] = -1
    world.lc_timer[:] = 0.0

    world.step_count += 1
    return world, events


def observe(world: HighwayWorld, ego_id: int = AGENT_ID) -> SceneState:
    """!Ego row first, then every vehicle within sensor range by signed ring distance, then id."""
    cfg = world.cfg
    e = world.index_of(ego_id)
    half = cfg.track_length / 2.0
    signed = np.mod(world.pos - world.pos[e] + half, cfg.track_length) - half

    in_range = (np.abs(signed) <= cfg.sensor_range) & (world.ids != world.ids[e])
    idx = np.flatnonzero(in_range)
    idx = idx[np.lexsort((world.ids[idx], signed[idx]))]

    rows = [VehicleFeatures(int(world.ids[e]), 0.0, 0.0, 0, float(world.speed[e]), int(world.lane[e]), is_agent=True)]
    for j in idx:
        rows.append(VehicleFeatures(
            vehicle_id=int(world.ids[j]),
            rel_distance=float(signed[j]),
            rel_speed=float(world.speed[j] - world.speed[e]),
            rel_lane=int(world.lane[j] - world.lane[e]),
            own_speed=float(world.speed[j]),
            own_lane=int(world.lane[j]),
        ))
    return SceneState(tuple(rows), float(world.time), cfg.scale)


def events_frame(events) -> pl.DataFrame:
    schema = {c: t for c, (t, _) in EVENTS_SCHEMA.items()}
    return safe_vector_cast(pl.DataFrame([e._asdict() for e in events], schema=schema), EVENTS_SCHEMA)


def write_events(events, path) -> Path:
    """!Writes an event log CSV (step, vehicle_id, event, lane_from, lane_to)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    events_frame(events).write_csv(path)
    return path
