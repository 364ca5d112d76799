# ===========================================
# trainer.py
# ===========================================

## \file trainer.py
## \brief Offline Surrogate-Q training loop and the DeepSet-Q baseline trainer.
##
## \details
## \par Description
##     Each gradient step samples `batch_size` scene transitions uniformly,
##     projects every valid participant of every scene into one virtual batch,
##     computes bootstrapped targets from the target networks and minimises
##
##         (1 / m) * sum_i sum_p (y_i^p - Q(s_i, a_i^p | p))^2
##
##     with Adam. Target networks follow their online networks by Polyak
##     averaging. With clipped double-Q two independently initialised
##     online/target pairs are trained on the same virtual batches and the
##     target is the minimum of the two target-net maxima. The trained agent
##     acts greedily on the element-wise minimum of the two online networks,
##     and checkpoints store both.
##
##     Both the online and the target pass encode every distinct scene exactly
##     once, however many of its participants are in the batch.
##
## \par Sampling
##     - `scene`   (default) scenes uniformly, loss normalised by the scene count
##     - `uniform` virtual samples uniformly from the flattened buffer,
##                 loss normalised by the number of drawn samples
##
## \par Metrics log
##     Append-only CSV with columns step, loss, mean_q, checkpoint
##     (see METRICS_SCHEMA).


from dataclasses import dataclass, field, replace
from pathlib import Path
from tqdm import tqdm
import polars as pl
import numpy as np

from model.errors import ConfigError, ContractError, EmptyBufferError, NumericError
from model.nn_core import AdamState, adam_step, polyak_update
from model.qnet import ARCHITECTURES, ClippedDoubleQ, save_checkpoint
from model.scene import (
    Action, ReplayBuffer, VirtualSample, build_virtual_batch, flatten_buffer, project_agent, sample_minibatch,
)
from pipeline.schema import METRICS_SCHEMA
from pipeline.utils import debug, log, safe_vector_cast


SAMPLING_MODES = ("scene", "uniform")


@dataclass(frozen=True)
class TrainConfig:
    """!Training hyperparameters; a key-value config file mirrors these field names.

    @throws ConfigError On out-of-range values.
    """
    gamma: float = 0.99
    batch_size: int = 64
    gradient_steps: int = 100_000
    learning_rate: float = 1e-4
    tau: float = 1e-4
    seed: int = 7
    clipped_double_q: bool = True
    eval_interval: int = 1000
    checkpoint_interval: int = 0
    sampling: str = "scene"
    algo: str = "surrogate"

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.gradient_steps < 0:
            raise ConfigError(f"gradient_steps must be >= 0, got {self.gradient_steps}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.eval_interval < 1 or self.checkpoint_interval < 0:
            raise ConfigError("eval_interval must be >= 1 and checkpoint_interval >= 0")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"sampling must be one of {SAMPLING_MODES}, got '{self.sampling}'")
        if self.algo not in ARCHITECTURES:
            raise ConfigError(f"algo must be one of {tuple(ARCHITECTURES)}, got '{self.algo}'")
        if self.algo == "deepset" and self.sampling != "scene":
            raise ConfigError("DeepSet-Q trains on agent samples only; use sampling=scene")


@dataclass
class TrainerState:
    """!Online and target networks, one Adam state per parameter block, step counter and loss history.

    `online[1]` / `target[1]` exist only with clipped double-Q.
    """
    online: list
    target: list
    adam: list
    rng: np.random.Generator
    step: int = 0
    loss_history: list = field(default_factory=list)
    last_mean_q: float = 0.0
    flat_index: tuple | None = field(default=None, repr=False)


def init_trainer(config: TrainConfig) -> TrainerState:
    rng = np.random.default_rng(config.seed)
    cls = ARCHITECTURES[config.algo]
    pairs = 2 if config.clipped_double_q else 1

    online = [cls.initialize(rng) for _ in range(pairs)]
    target = [net.copy() for net in online]
    adam = [[AdamState.fresh(block) for block in net.blocks()] for net in online]
    return TrainerState(online, target, adam, rng)


def _group_by_scene(batch) -> tuple:
    """!Distinct transitions in first-appearance order plus per-sample scene index and participant."""
    index, transitions = {}, []
    scene_idx = np.empty(len(batch), dtype=np.int64)
    participants = np.empty(len(batch), dtype=np.int64)

    for k, sample in enumerate(batch):
        kappa = sample.transition
        if not 0 <= sample.participant < len(kappa) or not kappa.valid_mask[sample.participant]:
            raise ContractError(f"Sample participant {sample.participant} is not a valid row of its transition")
        key = id(kappa)
        if key not in index:
            index[key] = len(transitions)
            transitions.append(kappa)
        scene_idx[k] = index[key]
        participants[k] = sample.participant
    return transitions, scene_idx, participants


def bootstrap_targets(rewards, target_maxima, gamma: float) -> np.ndarray:
    """!`r + gamma * min_k max_a Q'_k`; `target_maxima` holds one array per target network."""
    best = np.minimum.reduce([np.asarray(m, dtype=np.float64) for m in target_maxima])
    return np.asarray(rewards, dtype=np.float64) + gamma * best


def compute_targets(state: TrainerState, batch, gamma: float) -> np.ndarray:
    """!Per-sample TD targets; the task is continuing so nothing is masked as terminal.

    @throws ContractError If a sample points at a masked-out or missing participant.
    """
    if not batch:
        return np.zeros(0)
    transitions, scene_idx, participants = _group_by_scene(batch)
    successors = [kappa.s_t1 for kappa in transitions]
    rewards = np.array([s.reward for s in batch], dtype=np.float64)

    maxima = [net.forward_batch(successors, scene_idx, participants).q.max(axis=1) for net in state.target]
    return bootstrap_targets(rewards, maxima, gamma)


def td_loss(net, batch, targets, normalizer: float) -> tuple:
    """!Squared TD error summed over the virtual batch and divided by `normalizer`.

    @return `(loss, block_grads, q_taken)`.
    """
    transitions, scene_idx, participants = _group_by_scene(batch)
    actions = np.array([int(s.action) for s in batch], dtype=np.int64)
    rows = np.arange(len(batch))

    fwd = net.forward_batch([kappa.s_t for kappa in transitions], scene_idx, participants)
    q_taken = fwd.q[rows, actions]
    error = q_taken - np.asarray(targets, dtype=np.float64)
    loss = float(error @ error) / normalizer

    grad_q = np.zeros_like(fwd.q)
    grad_q[rows, actions] = 2.0 * error / normalizer
    return loss, net.backward_batch(fwd, grad_q), q_taken


def _draw_batch(state: TrainerState, buffer: ReplayBuffer, config: TrainConfig) -> tuple:
    if config.sampling == "uniform":
        if state.flat_index is None:
            state.flat_index = flatten_buffer(buffer)
        scene_idx, participants = state.flat_index
        if len(scene_idx) == 0:
            raise EmptyBufferError("Replay buffer holds no valid participants")
        picks = state.rng.integers(0, len(scene_idx), size=config.batch_size)
        batch = []
        for i in picks:
            kappa, p = buffer[int(scene_idx[i])], int(participants[i])
            batch.append(VirtualSample(kappa, p, Action(int(kappa.actions[p])), float(kappa.rewards[p])))
        return batch, float(config.batch_size)

    minibatch = sample_minibatch(buffer, config.batch_size, state.rng)
    if config.algo == "deepset":
        batch = [sample for kappa in minibatch for sample in project_agent(kappa)]
    else:
        batch = build_virtual_batch(minibatch)
    return batch, float(config.batch_size)


def train_step(state: TrainerState, buffer: ReplayBuffer, config: TrainConfig) -> tuple:
    """!One Adam step per online network followed by Polyak target updates.

    @return `(state, loss)` where loss is the value for the first online network.

    @throws EmptyBufferError If the buffer is empty.
    @throws NumericError If the loss becomes non-finite.
    """
    if len(buffer) == 0:
        raise EmptyBufferError("Cannot train on an empty replay buffer")

    batch, normalizer = _draw_batch(state, buffer, config)
    state.step += 1
    if not batch:
        debug(f"step {state.step}: no valid samples drawn, skipping update")
        state.loss_history.append(0.0)
        return state, 0.0

    targets = compute_targets(state, batch, config.gamma)
    losses = []

    for k, net in enumerate(state.online):
        loss, grads, q_taken = td_loss(net, batch, targets, normalizer)
        if not np.isfinite(loss):
            raise NumericError(f"Non-finite loss {loss} at step {state.step} (online net {k})")
        if k == 0:
            state.last_mean_q = float(q_taken.mean())

        blocks, adam = [], []
        for params, g, opt in zip(net.blocks(), grads, state.adam[k]):
            params, opt = adam_step(opt, params, g, config.learning_rate)
            blocks.append(params)
            adam.append(opt)

        state.online[k] = net.with_blocks(blocks)
        state.adam[k] = adam
        target = state.target[k]
        state.target[k] = target.with_blocks([
            polyak_update(t, o, config.tau) for t, o in zip(target.blocks(), blocks)
        ])
        losses.append(loss)

    state.loss_history.append(losses[0])
    return state, losses[0]


def acting_network(state):
    """!The predictor a trained agent acts with.

    With clipped double-Q both online networks vote through their element-wise
    minimum, so an action only wins where both estimates agree it is better.
    """
    if len(state.online) == 1:
        return state.online[0]
    return ClippedDoubleQ(tuple(state.online))


def append_metrics(path, rows: list):
    """!Appends metric rows to the CSV log, writing the header only for a new file."""
    if not rows:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = safe_vector_cast(pl.DataFrame(rows, schema={c: t for c, (t, _) in METRICS_SCHEMA.items()}), METRICS_SCHEMA)
    new_file = not path.exists()
    with open(path, "ab") as fh:
        df.write_csv(fh, include_header=new_file)


def train(config: TrainConfig, buffer: ReplayBuffer, checkpoint_dir=None, metrics_path=None,
          progress: bool = True) -> tuple:
    """!Runs `gradient_steps` train steps with periodic loss logging and checkpointing.

    The buffer is frozen for the duration. Identical seeds give identical
    networks and checkpoints.

    @return `(state, metrics)` with metrics following METRICS_SCHEMA.
    """
    state = init_trainer(config)
    buffer.freeze()
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
    log(f"Training {config.algo} for {config.gradient_steps} steps on {len(buffer)} transitions "
        f"(batch {config.batch_size}, sampling {config.sampling}, seed {config.seed})")

    rows = []
    for _ in tqdm(range(config.gradient_steps), desc=f"train[{config.algo}]", disable=not progress):
        state, loss = train_step(state, buffer, config)

        ckpt = None
        if checkpoint_dir and config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
            path = checkpoint_dir / f"{config.algo}_step{state.step:08d}.dsqn"
            ckpt = str(save_checkpoint(path, acting_network(state)))

        if state.step % config.eval_interval == 0 or state.step == config.gradient_steps or ckpt:
            row = {"step": state.step, "loss": loss, "mean_q": state.last_mean_q, "checkpoint": ckpt}
            rows.append(row)
            debug(f"step {state.step}: loss {loss:.6g}, mean Q {state.last_mean_q:.4f}")
            if metrics_path:
                append_metrics(metrics_path, [row])

    if checkpoint_dir:
        final = save_checkpoint(checkpoint_dir / f"{config.algo}_final.dsqn", acting_network(state))
        log(f"Checkpoint saved: {final}")

    schema = {c: t for c, (t, _) in METRICS_SCHEMA.items()}
    return state, pl.DataFrame(rows, schema=schema)


def train_deepset_baseline(config: TrainConfig, buffer: ReplayBuffer, **kwargs):
    """!Agent-only DQN on the DeepSet-Q architecture; returns its acting network."""
    state, _ = train(replace(config, algo="deepset", sampling="scene"), buffer, **kwargs)
    return acting_network(state)
