from dataclasses import replace

import numpy as np
import polars as pl
import pytest

from model.errors import ConfigError, ContractError, EmptyBufferError, NumericError
from model.qnet import ClippedDoubleQ, DeepSetQNet, SurrogateQNet, load_checkpoint, q_values_all
from model.scene import (
    Action, BufferMeta, ReplayBuffer, SceneState, SceneTransition, VehicleFeatures, VirtualSample,
    build_virtual_batch,
)
from model.trainer import (
    TrainConfig, acting_network, bootstrap_targets, compute_targets, init_trainer, td_loss, train,
    train_deepset_baseline, train_step,
)


FAST = TrainConfig(batch_size=4, gradient_steps=5, learning_rate=1e-3, tau=0.01, eval_interval=2)


def _arrays(net):
    return [a for block in net.blocks() for a in block.arrays()]


def _self_loop(reward=1.0):
    agent = VehicleFeatures(0, 0.0, 0.0, 0, 20.0, 1, is_agent=True)
    s = SceneState((agent,))
    return SceneTransition(s, s, [int(Action.KEEP)], [reward], [True])


class TestTrainConfig:
    @pytest.mark.parametrize("changes", [
        {"gamma": 1.0}, {"batch_size": 0}, {"tau": 0.0}, {"learning_rate": -1.0},
        {"sampling": "random"}, {"algo": "lstm"}, {"algo": "deepset", "sampling": "uniform"},
    ])
    def test_rejects_invalid(self, changes):
        with pytest.raises(ConfigError):
            TrainConfig(**changes)

    def test_defaults(self):
        config = TrainConfig()
        assert config.gamma == 0.99 and config.batch_size == 64 and config.clipped_double_q


class TestTargets:
    def test_gamma_zero_gives_rewards(self):
        np.testing.assert_array_equal(bootstrap_targets([0.3, -0.1], [[5.0, 7.0]], 0.0), [0.3, -0.1])

    def test_clipped_double_q_takes_minimum(self):
        y = bootstrap_targets([0.0], [[2.0], [3.0]], 0.99)
        assert y[0] == pytest.approx(1.98)

    def test_compute_targets_with_gamma_zero(self, small_buffer):
        state = init_trainer(FAST)
        batch = build_virtual_batch(list(small_buffer)[:3])
        y = compute_targets(state, batch, 0.0)
        np.testing.assert_array_equal(y, [s.reward for s in batch])

    def test_compute_targets_match_single_scene_pass(self, small_buffer):
        state = init_trainer(replace(FAST, clipped_double_q=False))
        batch = build_virtual_batch(list(small_buffer)[:4])
        y = compute_targets(state, batch, 0.9)
        for sample, target in zip(batch, y):
            q_next = q_values_all(state.target[0], sample.transition.s_t1)[sample.participant]
            assert target == pytest.approx(sample.reward + 0.9 * q_next.max(), abs=1e-10)

    def test_invalid_participant(self, small_buffer):
        kappa = small_buffer[0]
        bad = VirtualSample(kappa, len(kappa), Action.KEEP, 0.0)
        with pytest.raises(ContractError):
            compute_targets(init_trainer(FAST), [bad], 0.9)


class TestLoss:
    def test_matches_per_sample_oracle(self, small_buffer):
        state = init_trainer(replace(FAST, clipped_double_q=False))
        net = state.online[0]
        batch = build_virtual_batch(list(small_buffer)[:4])
        targets = np.linspace(-1.0, 1.0, len(batch))

        loss, _, q_taken = td_loss(net, batch, targets, 4.0)
        expected = [q_values_all(net, s.transition.s_t)[s.participant, int(s.action)] for s in batch]
        np.testing.assert_allclose(q_taken, expected, rtol=0, atol=1e-10)
        assert loss == pytest.approx(float(np.sum((np.array(expected) - targets) ** 2)) / 4.0, rel=1e-10)

    def test_each_scene_encoded_once(self, small_buffer):
        net = SurrogateQNet.initialize(np.random.default_rng(0))
        kappa = max(small_buffer, key=len)
        batch = build_virtual_batch([kappa, kappa])
        net.counters.reset()
        td_loss(net, batch, np.zeros(len(batch)), 2.0)
        assert net.counters.rho == 1
        assert net.counters.phi == len(kappa)
        assert net.counters.qhead == len(batch)


class TestTrainStep:
    def test_polyak_keeps_target_between_old_target_and_online(self, small_buffer):
        config = replace(FAST, tau=0.2)
        state = init_trainer(config)
        old_target = [a.copy() for a in _arrays(state.target[0])]
        state, _ = train_step(state, small_buffer, config)
        for t_old, t_new, online in zip(old_target, _arrays(state.target[0]), _arrays(state.online[0])):
            assert np.all(t_new >= np.minimum(t_old, online) - 1e-15)
            assert np.all(t_new <= np.maximum(t_old, online) + 1e-15)
            np.testing.assert_allclose(t_new, 0.2 * online + 0.8 * t_old, atol=1e-14)

    def test_step_counts_and_history(self, small_buffer):
        state = init_trainer(FAST)
        for _ in range(3):
            state, loss = train_step(state, small_buffer, FAST)
            assert np.isfinite(loss)
        assert state.step == 3 and len(state.loss_history) == 3

    def test_uniform_sampling(self, small_buffer):
        config = replace(FAST, sampling="uniform")
        state = init_trainer(config)
        state, loss = train_step(state, small_buffer, config)
        assert np.isfinite(loss) and state.flat_index is not None

    def test_empty_buffer(self):
        with pytest.raises(EmptyBufferError):
            train_step(init_trainer(FAST), ReplayBuffer(), FAST)

    def test_non_finite_reward_raises(self):
        buffer = ReplayBuffer(BufferMeta(), [_self_loop(np.inf)])
        with pytest.raises(NumericError):
            train_step(init_trainer(FAST), buffer, FAST)


class TestTrain:
    def test_zero_steps_keeps_initial_networks(self, small_buffer, tmp_path):
        config = replace(FAST, gradient_steps=0)
        state, metrics = train(config, small_buffer, checkpoint_dir=tmp_path, progress=False)
        fresh = init_trainer(config)
        assert all(np.array_equal(a, b) for a, b in zip(_arrays(state.online[0]), _arrays(fresh.online[0])))
        assert metrics.height == 0
        restored = load_checkpoint(tmp_path / "surrogate_final.dsqn")
        assert isinstance(restored, ClippedDoubleQ) and len(restored.members) == 2
        for member, online in zip(restored.members, fresh.online):
            assert all(np.array_equal(a, b) for a, b in zip(_arrays(member), _arrays(online)))

    def test_same_seed_is_deterministic(self, small_buffer):
        a, _ = train(FAST, small_buffer, progress=False)
        b, _ = train(FAST, small_buffer, progress=False)
        assert a.loss_history == b.loss_history
        assert all(np.array_equal(x, y) for x, y in zip(_arrays(a.online[0]), _arrays(b.online[0])))

    def test_freezes_buffer(self, small_buffer):
        train(replace(FAST, gradient_steps=1), small_buffer, progress=False)
        assert small_buffer.frozen

    def test_metrics_and_checkpoints(self, small_buffer, tmp_path):
        config = replace(FAST, gradient_steps=4, checkpoint_interval=2)
        metrics_path = tmp_path / "metrics.csv"
        _, metrics = train(config, small_buffer, checkpoint_dir=tmp_path, metrics_path=metrics_path, progress=False)

        assert metrics["step"].to_list() == [2, 4]
        assert (tmp_path / "surrogate_step00000002.dsqn").exists()
        assert (tmp_path / "surrogate_step00000004.dsqn").exists()
        assert (tmp_path / "surrogate_final.dsqn").exists()

        logged = pl.read_csv(metrics_path)
        assert logged["step"].to_list() == [2, 4]
        assert logged.columns == ["step", "loss", "mean_q", "checkpoint"]

    def test_deepset_baseline(self, small_buffer):
        net = train_deepset_baseline(replace(FAST, gradient_steps=2), small_buffer, progress=False)
        assert net.arch == "deepset"
        assert all(isinstance(m, DeepSetQNet) for m in net.members)

    def test_single_pair_acts_alone(self, small_buffer, tmp_path):
        config = replace(FAST, gradient_steps=1, clipped_double_q=False)
        state, _ = train(config, small_buffer, checkpoint_dir=tmp_path, progress=False)
        assert acting_network(state) is state.online[0]
        assert isinstance(load_checkpoint(tmp_path / "surrogate_final.dsqn"), SurrogateQNet)

    def test_pair_acts_on_minimum(self, small_buffer):
        state, _ = train(FAST, small_buffer, progress=False)
        pair = acting_network(state)
        s = small_buffer[0].s_t
        expected = np.minimum(state.online[0].agent_q(s), state.online[1].agent_q(s))
        np.testing.assert_array_equal(pair.agent_q(s), expected)


@pytest.mark.slow
class TestConvergence:
    def test_self_loop_reaches_reward(self):
        config = TrainConfig(gamma=0.0, batch_size=1, gradient_steps=20_000, learning_rate=1e-4, tau=0.05,
                             clipped_double_q=False, eval_interval=1000)
        state, _ = train(config, ReplayBuffer(BufferMeta(), [_self_loop(0.5)]), progress=False)
        q = q_values_all(state.online[0], _self_loop().s_t)[0, int(Action.KEEP)]
        assert 0.499 <= q <= 0.501

    def test_zero_rewards_drive_loss_to_zero(self, small_buffer):
        silent = ReplayBuffer(BufferMeta(), [
            SceneTransition(k.s_t, k.s_t1, k.actions, np.zeros(len(k)), k.valid_mask) for k in small_buffer
        ])
        config = TrainConfig(gamma=0.5, batch_size=8, gradient_steps=3000, learning_rate=1e-3, tau=0.05,
                             eval_interval=1000)
        state, _ = train(config, silent, progress=False)

        losses = np.array(state.loss_history)
        assert losses[-100:].mean() < 0.1 * losses[:100].mean()
        assert losses[-100:].mean() < 1e-3
