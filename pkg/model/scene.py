# ===========================================
# scene.py
# ===========================================

## \file scene.py
## \brief Scene-transition data model: actions, rewards, dummy alignment, projection, virtual batches.
##
## \details
## \par Description
##     A scene is the agent plus every vehicle in sensor range, one
##     `VehicleFeatures` row each, agent first. A `SceneTransition` pairs two
##     aligned scenes with one action, reward and validity flag per participant.
##     Projecting a transition yields one `VirtualSample` per valid
##     participant; concatenating the projections of a uniformly sampled
##     minibatch gives the virtual batch the trainer fits.
##
## \par Conventions
##     - Lane indices increase leftward; the rightmost lane is 0.
##     - Distances are signed, ring-shortest, positive ahead of the agent.
##     - Network feature row (width 6):
##       [rel_distance / sensor_range, rel_speed / v_desired, rel_lane,
##        own_speed / v_desired, own_lane / (lanes - 1), is_agent]
##     - Participants without an inferable action carry `Action.INVALID` and reward 0.


from dataclasses import dataclass, field
from functools import cached_property
from enum import IntEnum
from typing import Iterable, Sequence
import numpy as np

from model.errors import ContractError, DataError, EmptyBufferError


FEATURE_WIDTH = 6
ACTION_COUNT = 3
LANE_CHANGE_PENALTY = 0.01


class Action(IntEnum):
    KEEP = 0
    LEFT = 1
    RIGHT = 2
    INVALID = -1

    @property
    def is_lane_change(self) -> bool:
        return self in (Action.LEFT, Action.RIGHT)


@dataclass(frozen=True)
class FeatureScale:
    """!Normalisation constants shared by every scene of one buffer."""
    sensor_range: float = 80.0
    v_desired: float = 27.0
    lanes: int = 3

    def __post_init__(self):
        if self.sensor_range <= 0 or self.v_desired <= 0 or self.lanes < 1:
            raise ValueError(f"Invalid feature scale {self}")


@dataclass(frozen=True)
class VehicleFeatures:
    vehicle_id: int
    rel_distance: float
    rel_speed: float
    rel_lane: int
    own_speed: float
    own_lane: int
    is_agent: bool = False
    is_dummy: bool = False

    def feature_row(self, scale: FeatureScale) -> list:
        return [
            self.rel_distance / scale.sensor_range,
            self.rel_speed / scale.v_desired,
            float(self.rel_lane),
            self.own_speed / scale.v_desired,
            self.own_lane / max(scale.lanes - 1, 1),
            1.0 if self.is_agent else 0.0,
        ]


@dataclass(frozen=True)
class SceneState:
    """!Ordered participants of one time step, agent first.

    @throws DataError If the agent is not the single `is_agent` row at index 0,
            vehicle ids repeat, or a real row lies outside sensor range.
    """
    vehicles: tuple
    timestamp: float = 0.0
    scale: FeatureScale = field(default_factory=FeatureScale)

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        if not self.vehicles:
            raise DataError("A scene needs at least the agent row")
        if not self.vehicles[0].is_agent or sum(v.is_agent for v in self.vehicles) != 1:
            raise DataError("A scene needs exactly one agent row, at index 0")
        ids = [v.vehicle_id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise DataError(f"Duplicate vehicle ids in scene at t={self.timestamp}")
        agent = self.vehicles[0]
        if agent.rel_distance != 0 or agent.rel_speed != 0 or agent.rel_lane != 0:
            raise DataError("Agent row must have zero relative features")
        limit = self.scale.sensor_range + 1e-9
        for v in self.vehicles:
            if not v.is_dummy and abs(v.rel_distance) > limit:
                raise DataError(f"Vehicle {v.vehicle_id} at {v.rel_distance:.2f} m is outside sensor range")

    def __len__(self) -> int:
        return len(self.vehicles)

    @property
    def agent(self) -> VehicleFeatures:
        return self.vehicles[0]

    @property
    def ids(self) -> tuple:
        return tuple(v.vehicle_id for v in self.vehicles)

    @cached_property
    def features(self) -> np.ndarray:
        """!`(len, 6)` float64 network input, row order = scene order."""
        return np.array([v.feature_row(self.scale) for v in self.vehicles], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class SceneTransition:
    s_t: SceneState
    s_t1: SceneState
    actions: np.ndarray
    rewards: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.int8))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=np.float64))
        object.__setattr__(self, "valid_mask", np.asarray(self.valid_mask, dtype=bool))

        n = len(self.s_t)
        if self.s_t.ids != self.s_t1.ids:
            raise DataError("Transition states are not aligned (vehicle ids differ)")
        if not (len(self.actions) == len(self.rewards) == len(self.valid_mask) == n):
            raise DataError("Action, reward and mask vectors must match the scene size")
        if np.any(self.actions[~self.valid_mask] != Action.INVALID):
            raise DataError("Masked-out participants must carry the sentinel action")
        if np.any(self.actions[self.valid_mask] < 0):
            raise DataError("Valid participants need a concrete action")

    def __len__(self) -> int:
        return len(self.s_t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneTransition):
            return NotImplemented
        return (
            self.s_t == other.s_t
            and self.s_t1 == other.s_t1
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.valid_mask, other.valid_mask)
        )

    @property
    def valid_count(self) -> int:
        return int(self.valid_mask.sum())

    @property
    def agent_action(self) -> Action:
        return Action(int(self.actions[0]))


@dataclass(frozen=True, eq=False)
class VirtualSample:
    transition: SceneTransition
    participant: int
    action: Action
    reward: float


def infer_action(lane_t: int, lane_t1: int) -> Action:
    """!Action from two consecutive lane indices; jumps over more than one lane are INVALID."""
    delta = int(lane_t1) - int(lane_t)
    if delta == 0:
        return Action.KEEP
    if delta == 1:
        return Action.LEFT
    if delta == -1:
        return Action.RIGHT
    return Action.INVALID


def label_reward(action: Action, own_speed_t1: float, v_desired: float) -> float:
    """!Agent reward `1 - |v - v_desired| / v_desired - p_lc(action)`, applied to any participant.

    @throws ValueError If v_desired is not positive.
    """
    if v_desired <= 0:
        raise ValueError(f"v_desired must be positive, got {v_desired}")
    penalty = LANE_CHANGE_PENALTY if Action(action).is_lane_change else 0.0
    return 1.0 - abs(own_speed_t1 - v_desired) / v_desired - penalty


def _dummy_from(known: VehicleFeatures, agent: VehicleFeatures, scale: FeatureScale) -> VehicleFeatures:
    side = 1.0 if known.rel_distance >= 0 else -1.0
    span = max(scale.lanes - 1, 1)
    return VehicleFeatures(
        vehicle_id=known.vehicle_id,
        rel_distance=side * scale.sensor_range,
        rel_speed=0.0,
        rel_lane=int(np.clip(known.own_lane - agent.own_lane, -span, span)),
        own_speed=known.own_speed,
        own_lane=known.own_lane,
        is_agent=False,
        is_dummy=True,
    )


def align_vehicles(s_t: SceneState, s_t1: SceneState) -> tuple:
    """!Brings both states onto the union of vehicle ids, padding with dummy rows.

    Order is the order of `s_t` followed by vehicles that only appear in `s_t1`.
    A dummy sits at +-sensor_range on the side the vehicle was last seen, with
    zero relative speed and the lane and speed of its known row.

    @return `(aligned_t, aligned_t1, valid_mask)`; a participant is valid when
            it has a real row at t and a lane change of at most one lane.

    @throws DataError If the agent differs between the two states.
    """
    if s_t.agent.vehicle_id != s_t1.agent.vehicle_id:
        raise DataError(
            f"Agent {s_t.agent.vehicle_id} at t is not the agent at t+1 ({s_t1.agent.vehicle_id})"
        )

    rows_t = {v.vehicle_id: v for v in s_t.vehicles}
    rows_t1 = {v.vehicle_id: v for v in s_t1.vehicles}
    order = list(rows_t) + [vid for vid in rows_t1 if vid not in rows_t]

    new_t, new_t1 = [], []
    for vid in order:
        a, b = rows_t.get(vid), rows_t1.get(vid)
        if a is None:
            a = _dummy_from(b, s_t.agent, s_t.scale)
        if b is None:
            b = _dummy_from(a, s_t1.agent, s_t1.scale)
        new_t.append(a)
        new_t1.append(b)

    mask = np.array(
        [not a.is_dummy and infer_action(a.own_lane, b.own_lane) != Action.INVALID for a, b in zip(new_t, new_t1)],
        dtype=bool,
    )
    aligned_t = SceneState(tuple(new_t), s_t.timestamp, s_t.scale)
    aligned_t1 = SceneState(tuple(new_t1), s_t1.timestamp, s_t1.scale)
    return aligned_t, aligned_t1, mask


def build_transition(s_t: SceneState, s_t1: SceneState, v_desired: float | None = None) -> SceneTransition:
    """!Aligns two observations and labels every valid participant's action and reward."""
    v_desired = s_t.scale.v_desired if v_desired is None else v_desired
    aligned_t, aligned_t1, mask = align_vehicles(s_t, s_t1)

    n = len(aligned_t)
    actions = np.full(n, int(Action.INVALID), dtype=np.int8)
    rewards = np.zeros(n, dtype=np.float64)
    for k in np.flatnonzero(mask):
        before, after = aligned_t.vehicles[k], aligned_t1.vehicles[k]
        action = infer_action(before.own_lane, after.own_lane)
        actions[k] = int(action)
        rewards[k] = label_reward(action, after.own_speed, v_desired)

    return SceneTransition(aligned_t, aligned_t1, actions, rewards, mask)


def project_scene(kappa: SceneTransition) -> list:
    """!One virtual sample per valid participant, agent included, in scene order."""
    return [
        VirtualSample(kappa, int(p), Action(int(kappa.actions[p])), float(kappa.rewards[p]))
        for p in np.flatnonzero(kappa.valid_mask)
    ]


def project_agent(kappa: SceneTransition) -> list:
    """!The agent-only projection used by the DeepSet-Q baseline."""
    if not kappa.valid_mask[0]:
        return []
    return [VirtualSample(kappa, 0, Action(int(kappa.actions[0])), float(kappa.rewards[0]))]


def build_virtual_batch(minibatch: Sequence) -> list:
    """!Concatenation of the projections of every scene in the minibatch.

    @throws ValueError If the minibatch is empty.
    """
    if not minibatch:
        raise ValueError("Cannot build a virtual batch from an empty minibatch")
    batch = []
    for kappa in minibatch:
        batch.extend(project_scene(kappa))
    return batch


@dataclass(frozen=True)
class BufferMeta:
    feature_width: int = FEATURE_WIDTH
    sensor_range: float = 80.0
    v_desired: float = 27.0
    action_dt: float = 2.0
    lanes: int = 3

    @property
    def scale(self) -> FeatureScale:
        return FeatureScale(self.sensor_range, self.v_desired, self.lanes)


class ReplayBuffer:
    """!Append-only store of scene transitions; read-only once frozen for training."""

    def __init__(self, meta: BufferMeta | None = None, transitions: Iterable = ()):
        self.meta = meta or BufferMeta()
        self._transitions = []
        self._frozen = False
        self.extend(transitions)

    def append(self, kappa: SceneTransition):
        if self._frozen:
            raise ContractError("Replay buffer is frozen for training")
        if kappa.s_t.scale != self.meta.scale:
            raise DataError(f"Transition scale {kappa.s_t.scale} does not match buffer scale {self.meta.scale}")
        self._transitions.append(kappa)

    def extend(self, transitions: Iterable):
        for kappa in transitions:
            self.append(kappa)

    def freeze(self) -> "ReplayBuffer":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def __len__(self) -> int:
        return len(self._transitions)

    def __getitem__(self, i):
        return self._transitions[i]

    def __iter__(self):
        return iter(self._transitions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReplayBuffer):
            return NotImplemented
        return self.meta == other.meta and self._transitions == other._transitions


def sample_minibatch(buffer: ReplayBuffer, m: int, rng: np.random.Generator) -> list:
    """!Draws `m` transitions uniformly with replacement.

    @throws EmptyBufferError If the buffer holds no transitions.
    """
    if len(buffer) == 0:
        raise EmptyBufferError("Cannot sample from an empty replay buffer")
    if m < 1:
        raise ValueError(f"Minibatch size must be >= 1, got {m}")
    return [buffer[i] for i in rng.integers(0, len(buffer), size=m)]


def flatten_buffer(buffer: ReplayBuffer) -> tuple:
    """!Enumerates every valid (transition index, participant) pair once.

    This is the naive projection of the whole buffer, used for uniform
    participant sampling.
    """
    scene_idx, participants = [], []
    for i, kappa in enumerate(buffer):
        valid = np.flatnonzero(kappa.valid_mask)
        scene_idx.append(np.full(len(valid), i, dtype=np.int64))
        participants.append(valid.astype(np.int64))
    if not scene_idx:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(scene_idx), np.concatenate(participants)
