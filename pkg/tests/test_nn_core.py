import numpy as np
import pytest

from model.errors import ContractError, FormatError, NumericError, ShapeError
from model.nn_core import (
    AdamState, MlpParams, adam_step, init_mlp, mlp_backward, mlp_forward, mlp_from_bytes, mlp_to_bytes,
    polyak_update,
)


def _loss(params, x, g):
    out, _ = mlp_forward(params, x)
    return float(np.sum(out * g))


class TestInit:
    def test_shapes_and_activations(self):
        params = init_mlp([6, 20, 80], np.random.default_rng(0), output_activation="relu")
        assert [w.shape for w in params.weights] == [(20, 6), (80, 20)]
        assert params.activations == ("relu", "relu")
        assert all(np.all(b == 0) for b in params.biases)

    def test_glorot_bound(self):
        params = init_mlp([10, 30, 3], np.random.default_rng(1))
        assert np.max(np.abs(params.weights[0])) <= np.sqrt(6.0 / 40)
        assert np.max(np.abs(params.weights[1])) <= np.sqrt(6.0 / 33)

    def test_seeded_init_is_reproducible(self):
        a = init_mlp([4, 8, 2], np.random.default_rng(5))
        b = init_mlp([4, 8, 2], np.random.default_rng(5))
        assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))

    def test_mismatched_layers_rejected(self):
        with pytest.raises(ShapeError):
            MlpParams([np.zeros((3, 2)), np.zeros((1, 4))], [np.zeros(3), np.zeros(1)], ("relu", "identity"))


class TestForward:
    def test_single_and_batch_agree(self):
        params = init_mlp([4, 8, 3], np.random.default_rng(2))
        x = np.random.default_rng(3).normal(size=(5, 4))
        batch, _ = mlp_forward(params, x)
        for i in range(5):
            single, _ = mlp_forward(params, x[i])
            np.testing.assert_allclose(single, batch[i], rtol=0, atol=1e-14)

    def test_hand_computed_relu(self):
        params = MlpParams([np.array([[1.0, -1.0]]), np.array([[2.0]])], [np.array([0.5]), np.array([-1.0])],
                           ("relu", "identity"))
        out, _ = mlp_forward(params, [1.0, 3.0])
        assert out[0] == pytest.approx(-1.0)
        out, _ = mlp_forward(params, [3.0, 1.0])
        assert out[0] == pytest.approx(2.0 * 2.5 - 1.0)

    def test_wrong_width(self):
        params = init_mlp([4, 3], np.random.default_rng(0))
        with pytest.raises(ShapeError):
            mlp_forward(params, np.zeros(5))

    def test_non_finite_input(self):
        params = init_mlp([2, 3], np.random.default_rng(0))
        with pytest.raises(NumericError):
            mlp_forward(params, [np.nan, 0.0])


class TestBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        params = init_mlp([4, 7, 5, 2], rng)
        params = params.with_arrays([a + rng.normal(scale=0.1, size=a.shape) for a in params.arrays()])
        x = rng.normal(size=(6, 4))
        g = rng.normal(size=(6, 2))

        _, cache = mlp_forward(params, x)
        grads, grad_in = mlp_backward(params, cache, g)

        eps = 1e-6
        arrays = params.arrays()
        for k, arr in enumerate(arrays):
            for idx in list(np.ndindex(arr.shape))[:6]:
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[k][idx] += eps
                minus[k][idx] -= eps
                numeric = (_loss(params.with_arrays(plus), x, g) - _loss(params.with_arrays(minus), x, g)) / (2 * eps)
                assert grads.arrays()[k][idx] == pytest.approx(numeric, rel=1e-4, abs=1e-6)

        x_plus = x.copy()
        x_plus[2, 1] += eps
        x_minus = x.copy()
        x_minus[2, 1] -= eps
        numeric = (_loss(params, x_plus, g) - _loss(params, x_minus, g)) / (2 * eps)
        assert grad_in[2, 1] == pytest.approx(numeric, rel=1e-4, abs=1e-6)

    def test_foreign_cache_rejected(self):
        rng = np.random.default_rng(0)
        a = init_mlp([2, 3], rng)
        b = a.copy()
        _, cache = mlp_forward(a, [1.0, 2.0])
        with pytest.raises(ContractError):
            mlp_backward(b, cache, np.ones(3))

    def test_gradient_shape_checked(self):
        params = init_mlp([2, 3], np.random.default_rng(0))
        _, cache = mlp_forward(params, np.ones((4, 2)))
        with pytest.raises(ContractError):
            mlp_backward(params, cache, np.ones((3, 3)))


class TestAdam:
    def test_zero_gradient_only_advances_step(self):
        params = init_mlp([3, 4, 2], np.random.default_rng(0))
        state = AdamState.fresh(params)
        new_params, new_state = adam_step(state, params, params.zeros_like(), 1e-3)
        assert new_state.step == 1
        assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), new_params.arrays()))

    def test_zero_gradient_decays_moments(self):
        params = init_mlp([2, 2], np.random.default_rng(0))
        grads = params.with_arrays([np.full_like(a, 0.3) for a in params.arrays()])
        moved, state = adam_step(AdamState.fresh(params), params, grads, 1e-2)
        coasted, after = adam_step(state, moved, moved.zeros_like(), 1e-2)

        assert after.step == 2
        for m_old, m_new, v_old, v_new in zip(state.first_moment, after.first_moment,
                                              state.second_moment, after.second_moment):
            np.testing.assert_allclose(m_new, 0.9 * m_old, rtol=1e-12)
            np.testing.assert_allclose(v_new, 0.999 * v_old, rtol=1e-12)
        # momentum carries the parameters further along -grad
        for before, now in zip(moved.arrays(), coasted.arrays()):
            assert np.all(now < before)

    def test_first_step_moves_by_learning_rate(self):
        params = init_mlp([2, 2], np.random.default_rng(0))
        grads = params.with_arrays([np.full_like(a, 0.3) for a in params.arrays()])
        new_params, _ = adam_step(AdamState.fresh(params), params, grads, 1e-2)
        delta = (params - new_params).arrays()
        for d in delta:
            np.testing.assert_allclose(d, 1e-2, rtol=1e-6)

    def test_non_finite_gradient(self):
        params = init_mlp([2, 2], np.random.default_rng(0))
        grads = params.with_arrays([np.full_like(a, np.inf) for a in params.arrays()])
        with pytest.raises(NumericError):
            adam_step(AdamState.fresh(params), params, grads, 1e-3)

    def test_descends_quadratic(self):
        rng = np.random.default_rng(4)
        params = init_mlp([3, 1], rng)
        x = rng.normal(size=(32, 3))
        y = x @ np.array([1.0, -2.0, 0.5])
        state = AdamState.fresh(params)

        def mse(p):
            out, _ = mlp_forward(p, x)
            return float(np.mean((out[:, 0] - y) ** 2))

        start = mse(params)
        for _ in range(300):
            out, cache = mlp_forward(params, x)
            grads, _ = mlp_backward(params, cache, (2.0 / len(x)) * (out - y[:, None]))
            params, state = adam_step(state, params, grads, 5e-2)
        assert mse(params) < 0.05 * start


class TestPolyak:
    def test_blend_and_bounds(self):
        rng = np.random.default_rng(0)
        target = init_mlp([3, 4], rng)
        online = init_mlp([3, 4], rng)
        mixed = polyak_update(target, online, 0.25)
        for m, t, o in zip(mixed.arrays(), target.arrays(), online.arrays()):
            np.testing.assert_allclose(m, 0.25 * o + 0.75 * t, atol=1e-15)
            assert np.all(m >= np.minimum(t, o)) and np.all(m <= np.maximum(t, o))

    def test_tau_extremes(self):
        rng = np.random.default_rng(1)
        target = init_mlp([2, 2], rng)
        online = init_mlp([2, 2], rng)
        assert all(np.array_equal(a, b) for a, b in zip(polyak_update(target, online, 0.0).arrays(), target.arrays()))
        assert all(np.array_equal(a, b) for a, b in zip(polyak_update(target, online, 1.0).arrays(), online.arrays()))

    def test_tau_out_of_range(self):
        params = init_mlp([2, 2], np.random.default_rng(0))
        with pytest.raises(ValueError):
            polyak_update(params, params, 1.5)


class TestSerialization:
    def test_bytes_round_trip(self):
        params = init_mlp([6, 20, 80], np.random.default_rng(9), output_activation="relu")
        restored, offset = mlp_from_bytes(mlp_to_bytes(params))
        assert offset == len(mlp_to_bytes(params))
        assert restored.activations == params.activations
        assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), restored.arrays()))

    def test_bad_magic(self):
        raw = bytearray(mlp_to_bytes(init_mlp([2, 2], np.random.default_rng(0))))
        raw[:4] = b"XXXX"
        with pytest.raises(FormatError):
            mlp_from_bytes(bytes(raw))

    def test_truncated(self):
        raw = mlp_to_bytes(init_mlp([2, 2], np.random.default_rng(0)))
        with pytest.raises(FormatError):
            mlp_from_bytes(raw[:-5])
