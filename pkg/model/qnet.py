# ===========================================
# qnet.py
# ===========================================

## \file qnet.py
## \brief Permutation-equivariant Surrogate-Q network and the DeepSet-Q baseline network.
##
## \details
## \par Description
##     Surrogate-Q encodes a scene once, `psi = rho(sum_j phi(x_j))`, then feeds
##     `[psi || x_p]` for every participant `p` through one shared Q-head, so one
##     pass yields a Q-vector per vehicle in scene order.
##
##     DeepSet-Q encodes only the surrounders (3 relative features each),
##     concatenates three agent features and predicts the agent's Q-vector.
##
## \par Architectures (hidden ReLU, linear Q output)
##     Surrogate-Q: phi 6-20-80, rho 80-80-80, Q 86-80-80-3
##     DeepSet-Q:   phi 3-20-80, rho 80-80-20, Q 23-100-100-3
##
## \par Exactness
##     Single-scene inference sums phi outputs over rows in lexicographic
##     feature order and evaluates the Q-head once per distinct row, so row
##     permutations permute outputs bit for bit.
##
## \par Checkpoint layout (little endian)
##     magic "DSQN" | u16 version | u8 architecture (0 surrogate, 1 deepset) |
##     u16 feature width | u16 action count | u8 member count |
##     phi, rho, Q blocks (see nn_core) for each member in turn


from dataclasses import dataclass, field
from pathlib import Path
from typing import ClassVar, Sequence
import numpy as np

from model.errors import FormatError, NumericError, ShapeError
from model.nn_core import MlpParams, init_mlp, mlp_backward, mlp_forward, mlp_from_bytes, mlp_to_bytes
from model.scene import ACTION_COUNT, FEATURE_WIDTH, Action, SceneState


PHI_HIDDEN = (20, 80)
RHO_HIDDEN = (80, 80)
HEAD_HIDDEN = (80, 80)

DEEPSET_PHI_HIDDEN = (20, 80)
DEEPSET_RHO_HIDDEN = (80, 20)
DEEPSET_HEAD_HIDDEN = (100, 100)
DEEPSET_SURROUND_WIDTH = 3
DEEPSET_AGENT_WIDTH = 3
DENSITY_NORM = 30.0

CHECKPOINT_MAGIC = b"DSQN"
CHECKPOINT_VERSION = 2
_CKPT_HEADER = np.dtype([
    ("magic", "S4"), ("version", "<u2"), ("arch", "u1"), ("feature_width", "<u2"), ("action_count", "<u2"),
    ("members", "u1"),
])


@dataclass
class ForwardCounters:
    """!Instrumentation: number of per-row phi, per-scene rho and per-row Q-head evaluations."""
    phi: int = 0
    rho: int = 0
    qhead: int = 0

    def reset(self):
        self.phi = self.rho = self.qhead = 0

    def snapshot(self) -> dict:
        return {"phi": self.phi, "rho": self.rho, "qhead": self.qhead}


def as_features(scene, width: int) -> np.ndarray:
    """!Network input matrix of a SceneState or an already-built `(n, width)` array.

    @throws ValueError On an empty scene.
    @throws ShapeError On a width mismatch.
    """
    x = scene.features if isinstance(scene, SceneState) else np.asarray(scene, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"Scene features must be a 2-D array, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("Scene is empty; the agent row is always required")
    if x.shape[1] != width:
        raise ShapeError(f"Scene rows have width {x.shape[1]}, expected {width}")
    return x


def _canonical_order(x: np.ndarray) -> np.ndarray:
    return np.lexsort(x.T[::-1])


@dataclass(frozen=True)
class SceneBatch:
    """!Rows of several scenes stacked into one matrix, with scene offsets."""
    rows: np.ndarray
    starts: np.ndarray
    scene_of_row: np.ndarray

    @classmethod
    def from_scenes(cls, scenes: Sequence, width: int) -> "SceneBatch":
        mats = [as_features(s, width) for s in scenes]
        if not mats:
            raise ValueError("SceneBatch needs at least one scene")
        sizes = np.array([len(m) for m in mats], dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        scene_of_row = np.repeat(np.arange(len(mats), dtype=np.int64), sizes)
        return cls(np.vstack(mats), starts, scene_of_row)

    @property
    def scene_count(self) -> int:
        return len(self.starts)

    def row_index(self, scene_idx, participants) -> np.ndarray:
        return self.starts[np.asarray(scene_idx, dtype=np.int64)] + np.asarray(participants, dtype=np.int64)


@dataclass
class BatchPass:
    """!Forward state of a batched pass, kept for the backward pass."""
    batch: SceneBatch
    head_rows: np.ndarray
    head_scenes: np.ndarray
    psi: np.ndarray
    q: np.ndarray
    caches: tuple


@dataclass
class SceneEncoding:
    psi: np.ndarray
    per_vehicle_phi: np.ndarray
    order: np.ndarray
    phi_cache: object = field(repr=False, default=None)
    rho_cache: object = field(repr=False, default=None)


@dataclass
class SurrogateQNet:
    """!Shared set encoder (phi, rho) and shared per-participant Q-head.

    @throws ShapeError If the block widths do not chain as
            phi: F -> H1, rho: H1 -> H2, Q: H2 + F -> A.
    """
    phi: MlpParams
    rho: MlpParams
    qhead: MlpParams
    feature_width: int = FEATURE_WIDTH
    action_count: int = ACTION_COUNT
    counters: ForwardCounters = field(default_factory=ForwardCounters, compare=False, repr=False)

    arch: ClassVar[str] = "surrogate"

    def __post_init__(self):
        if self.phi.input_width != self.feature_width:
            raise ShapeError(f"phi input width {self.phi.input_width} != feature width {self.feature_width}")
        if self.rho.input_width != self.phi.output_width:
            raise ShapeError("rho input width must equal phi output width")
        if self.qhead.input_width != self.rho.output_width + self.feature_width:
            raise ShapeError("Q-head input width must equal rho output width + feature width")
        if self.qhead.output_width != self.action_count:
            raise ShapeError("Q-head output width must equal the action count")
        if self.qhead.activations[-1] != "identity":
            raise ShapeError("Q-head output layer must be linear")

    @classmethod
    def initialize(cls, rng: np.random.Generator, feature_width: int = FEATURE_WIDTH,
                   action_count: int = ACTION_COUNT) -> "SurrogateQNet":
        phi = init_mlp([feature_width, *PHI_HIDDEN], rng, output_activation="relu")
        rho = init_mlp([PHI_HIDDEN[-1], *RHO_HIDDEN], rng, output_activation="relu")
        qhead = init_mlp([RHO_HIDDEN[-1] + feature_width, *HEAD_HIDDEN, action_count], rng)
        return cls(phi, rho, qhead, feature_width, action_count)

    def blocks(self) -> tuple:
        return (self.phi, self.rho, self.qhead)

    def with_blocks(self, blocks: Sequence) -> "SurrogateQNet":
        phi, rho, qhead = blocks
        return SurrogateQNet(phi, rho, qhead, self.feature_width, self.action_count, self.counters)

    def copy(self) -> "SurrogateQNet":
        return SurrogateQNet(self.phi.copy(), self.rho.copy(), self.qhead.copy(),
                             self.feature_width, self.action_count, ForwardCounters())

    def agent_q(self, scene) -> np.ndarray:
        return q_value_single(self, scene, 0)

    def forward_batch(self, scenes: Sequence, scene_idx, participants) -> BatchPass:
        """!Encodes every scene once and evaluates the Q-head for the selected participants.

        @param scenes Scenes to encode.
        @param scene_idx Scene index of each selected participant.
        @param participants Row index within its scene of each selected participant.
        """
        batch = scenes if isinstance(scenes, SceneBatch) else SceneBatch.from_scenes(scenes, self.feature_width)
        head_scenes = np.asarray(scene_idx, dtype=np.int64)
        head_rows = batch.row_index(head_scenes, participants)

        phi_out, phi_cache = mlp_forward(self.phi, batch.rows)
        pooled = np.add.reduceat(phi_out, batch.starts, axis=0)
        psi, rho_cache = mlp_forward(self.rho, pooled)
        head_in = np.hstack([psi[head_scenes], batch.rows[head_rows]])
        q, head_cache = mlp_forward(self.qhead, head_in)

        self.counters.phi += len(batch.rows)
        self.counters.rho += batch.scene_count
        self.counters.qhead += len(head_rows)
        return BatchPass(batch, head_rows, head_scenes, psi, q, (phi_cache, rho_cache, head_cache))

    def backward_batch(self, fwd: BatchPass, grad_q: np.ndarray) -> tuple:
        """!Parameter gradients of `sum(grad_q * q)` for a pass from `forward_batch`.

        The gradient reaching psi is accumulated per scene, then broadcast back
        to every phi row of that scene through the sum pool.
        """
        phi_cache, rho_cache, head_cache = fwd.caches
        g_head, g_in = mlp_backward(self.qhead, head_cache, grad_q)

        width = fwd.psi.shape[1]
        g_psi = np.zeros_like(fwd.psi)
        np.add.at(g_psi, fwd.head_scenes, g_in[:, :width])

        g_rho, g_pooled = mlp_backward(self.rho, rho_cache, g_psi)
        g_phi, _ = mlp_backward(self.phi, phi_cache, g_pooled[fwd.batch.scene_of_row])
        return (g_phi, g_rho, g_head)


def encode_scene(net: SurrogateQNet, scene) -> SceneEncoding:
    """!Permutation-invariant scene embedding with exactly one rho evaluation.

    @throws ValueError On an empty scene.
    @throws ShapeError On rows of the wrong width.
    """
    x = as_features(scene, net.feature_width)
    order = _canonical_order(x)

    phi_sorted, phi_cache = mlp_forward(net.phi, x[order])
    psi, rho_cache = mlp_forward(net.rho, phi_sorted.sum(axis=0))
    net.counters.phi += len(x)
    net.counters.rho += 1

    per_vehicle = np.empty_like(phi_sorted)
    per_vehicle[order] = phi_sorted
    return SceneEncoding(psi, per_vehicle, order, phi_cache, rho_cache)


def q_values_all(net: SurrogateQNet, scene) -> np.ndarray:
    """!Q-vector of every participant, shape `(len(scene), action_count)`, scene order.

    Identical feature rows share one head evaluation; the `qhead` counter
    still advances once per participant.
    """
    x = as_features(scene, net.feature_width)
    psi = encode_scene(net, x).psi

    distinct, inverse = np.unique(x, axis=0, return_inverse=True)
    head_in = np.hstack([np.broadcast_to(psi, (len(distinct), psi.shape[0])), distinct])
    q, _ = mlp_forward(net.qhead, head_in)
    net.counters.qhead += len(x)
    return q[np.asarray(inverse).reshape(-1)]


def q_value_single(net: SurrogateQNet, scene, p: int) -> np.ndarray:
    """!Q-vector of participant `p` alone.

    @throws ValueError If `p` is outside the scene.
    """
    x = as_features(scene, net.feature_width)
    if not 0 <= p < len(x):
        raise ValueError(f"Participant index {p} out of range for a scene of {len(x)}")
    psi = encode_scene(net, x).psi
    q, _ = mlp_forward(net.qhead, np.concatenate([psi, x[p]]))
    net.counters.qhead += 1
    return q


def q_values_naive(net: SurrogateQNet, scene) -> np.ndarray:
    """!Reference path that re-encodes the whole scene for every participant."""
    x = as_features(scene, net.feature_width)
    return np.vstack([q_value_single(net, x, p) for p in range(len(x))])


def greedy_from_q(q_vector) -> Action:
    """!Argmax with ties resolved in the order keep < left < right."""
    return Action(int(np.argmax(np.asarray(q_vector))))


def greedy_action(net, scene) -> Action:
    return greedy_from_q(net.agent_q(scene))


def qnet_backward(net: SurrogateQNet, scene, selected: Sequence, upstream_grads: Sequence) -> tuple:
    """!Gradients of `sum_p upstream_p * Q(p, action_p)` for one scene.

    @param selected `(participant, action)` pairs, participants distinct.
    @param upstream_grads One finite scalar per selected pair.

    @return `(phi_grads, rho_grads, qhead_grads)`.

    @throws ValueError On duplicate or out-of-range participants.
    @throws NumericError On non-finite upstream gradients.
    """
    x = as_features(scene, net.feature_width)
    participants = [int(p) for p, _ in selected]
    actions = [int(a) for _, a in selected]
    upstream = np.asarray(upstream_grads, dtype=np.float64)

    if len(set(participants)) != len(participants):
        raise ValueError("Duplicate participant in selection")
    if any(not 0 <= p < len(x) for p in participants):
        raise ValueError("Selected participant out of range")
    if any(not 0 <= a < net.action_count for a in actions):
        raise ValueError("Selected action out of range")
    if upstream.shape != (len(participants),):
        raise ValueError("One upstream gradient per selected participant is required")
    if not np.all(np.isfinite(upstream)):
        raise NumericError("Non-finite upstream gradient")

    fwd = net.forward_batch([x], np.zeros(len(participants), dtype=np.int64), participants)
    grad_q = np.zeros_like(fwd.q)
    grad_q[np.arange(len(participants)), actions] = upstream
    return net.backward_batch(fwd, grad_q)


def deepset_inputs(scene) -> tuple:
    """!Splits a 6-wide scene matrix into DeepSet-Q surrounder rows and agent features.

    Surrounders are the real (non-dummy) non-agent rows, described by their
    relative distance, speed and lane. The agent is described by its speed,
    its lane and the surrounder count over `DENSITY_NORM`.
    """
    if isinstance(scene, SceneState):
        x = scene.features
        real = np.array([not v.is_dummy for v in scene.vehicles], dtype=bool)
    else:
        x = as_features(scene, FEATURE_WIDTH)
        real = np.ones(len(x), dtype=bool)
    surround = x[1:][real[1:], :DEEPSET_SURROUND_WIDTH]
    agent = np.array([x[0, 3], x[0, 4], len(surround) / DENSITY_NORM], dtype=np.float64)
    return surround, agent


@dataclass
class DeepSetQNet:
    """!Baseline: set encoder over surrounders, concatenated agent features, agent-only Q-head."""
    phi: MlpParams
    rho: MlpParams
    qhead: MlpParams
    feature_width: int = DEEPSET_SURROUND_WIDTH
    action_count: int = ACTION_COUNT
    counters: ForwardCounters = field(default_factory=ForwardCounters, compare=False, repr=False)

    arch: ClassVar[str] = "deepset"

    def __post_init__(self):
        if self.phi.input_width != self.feature_width or self.rho.input_width != self.phi.output_width:
            raise ShapeError("DeepSet encoder widths do not chain")
        if self.qhead.input_width != self.rho.output_width + DEEPSET_AGENT_WIDTH:
            raise ShapeError("DeepSet Q-head input width must equal rho output width + agent width")
        if self.qhead.output_width != self.action_count:
            raise ShapeError("Q-head output width must equal the action count")

    @classmethod
    def initialize(cls, rng: np.random.Generator, feature_width: int = DEEPSET_SURROUND_WIDTH,
                   action_count: int = ACTION_COUNT) -> "DeepSetQNet":
        phi = init_mlp([feature_width, *DEEPSET_PHI_HIDDEN], rng, output_activation="relu")
        rho = init_mlp([DEEPSET_PHI_HIDDEN[-1], *DEEPSET_RHO_HIDDEN], rng, output_activation="relu")
        qhead = init_mlp([DEEPSET_RHO_HIDDEN[-1] + DEEPSET_AGENT_WIDTH, *DEEPSET_HEAD_HIDDEN, action_count], rng)
        return cls(phi, rho, qhead, feature_width, action_count)

    def blocks(self) -> tuple:
        return (self.phi, self.rho, self.qhead)

    def with_blocks(self, blocks: Sequence) -> "DeepSetQNet":
        phi, rho, qhead = blocks
        return DeepSetQNet(phi, rho, qhead, self.feature_width, self.action_count, self.counters)

    def copy(self) -> "DeepSetQNet":
        return DeepSetQNet(self.phi.copy(), self.rho.copy(), self.qhead.copy(),
                           self.feature_width, self.action_count, ForwardCounters())

    def agent_q(self, scene) -> np.ndarray:
        surround, agent = deepset_inputs(scene)
        pooled = np.zeros(self.phi.output_width)
        if len(surround):
            phi_out, _ = mlp_forward(self.phi, surround[_canonical_order(surround)])
            pooled = phi_out.sum(axis=0)
            self.counters.phi += len(surround)
        psi, _ = mlp_forward(self.rho, pooled)
        q, _ = mlp_forward(self.qhead, np.concatenate([psi, agent]))
        self.counters.rho += 1
        self.counters.qhead += 1
        return q

    def forward_batch(self, scenes: Sequence, scene_idx, participants) -> BatchPass:
        """!Batched agent-only pass; every selected participant must be the agent (index 0)."""
        if np.any(np.asarray(participants) != 0):
            raise ValueError("DeepSet-Q only evaluates the agent")
        parts = [deepset_inputs(s) for s in scenes]
        sizes = np.array([len(s) for s, _ in parts], dtype=np.int64)
        scene_of_row = np.repeat(np.arange(len(parts), dtype=np.int64), sizes)
        rows = np.vstack([s for s, _ in parts]) if sizes.sum() else np.zeros((0, self.feature_width))
        agents = np.vstack([a for _, a in parts])

        pooled = np.zeros((len(parts), self.phi.output_width))
        phi_cache = None
        if len(rows):
            phi_out, phi_cache = mlp_forward(self.phi, rows)
            np.add.at(pooled, scene_of_row, phi_out)
        psi, rho_cache = mlp_forward(self.rho, pooled)

        head_scenes = np.asarray(scene_idx, dtype=np.int64)
        q, head_cache = mlp_forward(self.qhead, np.hstack([psi[head_scenes], agents[head_scenes]]))

        self.counters.phi += len(rows)
        self.counters.rho += len(parts)
        self.counters.qhead += len(head_scenes)
        batch = SceneBatch(rows, np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64), scene_of_row)
        return BatchPass(batch, head_scenes, head_scenes, psi, q, (phi_cache, rho_cache, head_cache))

    def backward_batch(self, fwd: BatchPass, grad_q: np.ndarray) -> tuple:
        phi_cache, rho_cache, head_cache = fwd.caches
        g_head, g_in = mlp_backward(self.qhead, head_cache, grad_q)

        width = fwd.psi.shape[1]
        g_psi = np.zeros_like(fwd.psi)
        np.add.at(g_psi, fwd.head_scenes, g_in[:, :width])
        g_rho, g_pooled = mlp_backward(self.rho, rho_cache, g_psi)

        if phi_cache is None:
            g_phi = self.phi.zeros_like()
        else:
            g_phi, _ = mlp_backward(self.phi, phi_cache, g_pooled[fwd.batch.scene_of_row])
        return (g_phi, g_rho, g_head)


@dataclass
class ClippedDoubleQ:
    """!Independently trained networks acting as one predictor.

    Every Q-vector is the element-wise minimum over the members, the same
    pessimistic estimate the bootstrap targets are built from.

    @throws ValueError If there are no members or their architectures differ.
    """
    members: tuple

    def __post_init__(self):
        self.members = tuple(self.members)
        if not self.members:
            raise ValueError("ClippedDoubleQ needs at least one member network")
        first = self.members[0]
        if any(type(m) is not type(first) or m.feature_width != first.feature_width for m in self.members):
            raise ValueError("ClippedDoubleQ members must share one architecture")

    @property
    def arch(self) -> str:
        return self.members[0].arch

    @property
    def feature_width(self) -> int:
        return self.members[0].feature_width

    @property
    def action_count(self) -> int:
        return self.members[0].action_count

    def agent_q(self, scene) -> np.ndarray:
        return np.minimum.reduce([m.agent_q(scene) for m in self.members])


ARCHITECTURES = {"surrogate": SurrogateQNet, "deepset": DeepSetQNet}
_ARCH_CODES = {"surrogate": 0, "deepset": 1}


def save_checkpoint(path, net) -> Path:
    """!Writes every member's three parameter blocks behind an architecture header.

    `net` is a single network or a `ClippedDoubleQ`.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    members = net.members if isinstance(net, ClippedDoubleQ) else (net,)
    header = np.array(
        [(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, _ARCH_CODES[net.arch], net.feature_width, net.action_count,
          len(members))],
        dtype=_CKPT_HEADER,
    ).tobytes()
    body = b"".join(mlp_to_bytes(block) for member in members for block in member.blocks())
    path.write_bytes(header + body)
    return path


def load_checkpoint(path):
    """!Reads a predictor written by `save_checkpoint`.

    @return The network itself for one member, a `ClippedDoubleQ` for more.

    @throws FormatError On a bad magic tag, unknown version or architecture,
            a zero member count, or truncated blocks.
    """
    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEADER.itemsize:
        raise FormatError(f"{path}: file too short for a checkpoint header")
    header = np.frombuffer(buf, dtype=_CKPT_HEADER, count=1)[0]
    if header["magic"] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {header['magic']!r})")
    if int(header["version"]) != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {int(header['version'])}")
    names = {v: k for k, v in _ARCH_CODES.items()}
    if int(header["arch"]) not in names:
        raise FormatError(f"{path}: unknown architecture code {int(header['arch'])}")
    count = int(header["members"])
    if count < 1:
        raise FormatError(f"{path}: checkpoint holds no networks")

    cls = ARCHITECTURES[names[int(header["arch"])]]
    offset = _CKPT_HEADER.itemsize
    members = []
    for _ in range(count):
        blocks = []
        for _ in range(3):
            block, offset = mlp_from_bytes(buf, offset)
            blocks.append(block)
        members.append(cls(*blocks, int(header["feature_width"]), int(header["action_count"])))
    return members[0] if count == 1 else ClippedDoubleQ(tuple(members))
