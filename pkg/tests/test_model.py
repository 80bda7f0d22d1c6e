import numpy as np
import pytest

from meterguard.errors import ConfigError, DataError, DivergenceError, EmptyInputError, ShapeError
from meterguard.model import (
    NilmModel,
    TrainConfig,
    fd_jacobian,
    fd_stencil_is_smooth,
    forward,
    jacobian,
    jacobian_fd,
    load_checkpoint,
    mse,
    save_checkpoint,
    train,
)
from meterguard.signal import Unit, Window


def nwin(values):
    return Window(values, 0, Unit.NORMALIZED)


class TestForward:
    def test_identity_dense(self, rng):
        w = 6
        m = NilmModel.from_dense([np.eye(w)], [np.zeros(w)])
        x = rng.normal(size=w)
        np.testing.assert_array_equal(forward(m, nwin(x)).values, x)

    def test_constant_map(self, rng):
        b = rng.normal(size=5)
        m = NilmModel.from_dense([np.zeros((5, 5))], [b])
        for _ in range(3):
            np.testing.assert_array_equal(forward(m, nwin(rng.normal(size=5))).values, b)

    def test_shape_error(self):
        m = NilmModel.build(16)
        with pytest.raises(ShapeError):
            forward(m, nwin(np.zeros(15)))

    def test_requires_normalized(self):
        m = NilmModel.build(16)
        with pytest.raises(ShapeError):
            forward(m, Window(np.zeros(16)))

    def test_pure(self, rng):
        m = NilmModel.build(32, seed=3)
        x = nwin(rng.normal(size=32))
        assert forward(m, x).values.tobytes() == forward(m, x).values.tobytes()

    def test_batch_matches_single(self, rng):
        m = NilmModel.build(24, seed=1)
        xs = rng.normal(size=(5, 24))
        batch = m.forward_batch(xs)
        for i in range(5):
            np.testing.assert_allclose(batch[i], m(xs[i]), rtol=1e-12, atol=1e-12)

    def test_conv_against_direct_sum(self, rng):
        # single conv channel + identity dense head, checked against np.convolve
        m = NilmModel.build(12, conv=((5, 1),), seed=2)
        conv = m.layers[0]
        conv.activation = "linear"
        m.layers[1].weight[:] = np.eye(12)
        m.layers[1].bias[:] = 0.0
        x = rng.normal(size=12)
        kernel = conv.weight[0, 0]
        expected = np.convolve(x, kernel[::-1], mode="same") + conv.bias[0]
        np.testing.assert_allclose(m(x), expected, atol=1e-12)

    def test_trained_beats_untrained(self, house):
        from meterguard.experiment import eval_starts, gather, training_arrays

        x, y, mean, std = training_arrays(house, "fridge", 32, 16)
        starts = eval_starts(house, 32)
        held_x = (gather(house.scene.aggregate.power, starts, 32) - mean) / std
        held_y = (gather(house.scene.appliances["fridge"].power, starts, 32) - mean) / std
        fresh = NilmModel.build(32, seed=0, norm_mean=mean, norm_std=std)
        trained = train(fresh, x, y, TrainConfig(32, 2, 1e-3, "adam", 0))
        assert mse(trained, held_x, held_y) < mse(fresh, held_x, held_y)


class TestTrain:
    def test_zero_targets_shrink_output(self, rng):
        x = rng.normal(size=(256, 16))
        m = NilmModel.build(16, seed=0)
        before = np.mean(np.abs(m.forward_batch(x)))
        t = train(m, x, np.zeros_like(x), TrainConfig(16, 5, 0.05, "sgd", 0))
        assert np.mean(np.abs(t.forward_batch(x))) < before

    def test_identity_task_reduces_loss(self, rng):
        x = rng.normal(size=(512, 16))
        m = NilmModel.build(16, seed=4)
        initial = mse(m, x, x)
        t = train(m, x, x, TrainConfig(32, 5, 1e-2, "adam", 0))
        final = mse(t, x, x)
        assert final < initial
        assert all(np.isfinite(t.loss_history))

    def test_deterministic(self, rng):
        x = rng.normal(size=(128, 16))
        y = np.roll(x, 1, axis=1)
        cfg = TrainConfig(8, 2, 0.01, "sgd", 7)
        a = train(NilmModel.build(16, seed=1), x, y, cfg)
        b = train(NilmModel.build(16, seed=1), x, y, cfg)
        assert a.checksum() == b.checksum()

    def test_does_not_mutate_input_model(self, rng):
        x = rng.normal(size=(64, 16))
        m = NilmModel.build(16, seed=1)
        before = m.checksum()
        train(m, x, x, TrainConfig(8, 1, 0.01))
        assert m.checksum() == before

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            train(NilmModel.build(8), np.zeros((0, 8)), np.zeros((0, 8)), TrainConfig())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self, rng):
        x = rng.normal(size=(64, 8)) * 1e3
        with pytest.raises(DivergenceError) as info:
            train(NilmModel.build(8, seed=0), x, x * 1e3, TrainConfig(8, 3, 1e3, "sgd", 0))
        assert info.value.epoch == 1

    @pytest.mark.parametrize(
        "kwargs", [dict(batch_size=0), dict(learning_rate=0.0), dict(optimizer="rmsprop"), dict(epochs=0)]
    )
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestJacobian:
    def test_linear_model(self, rng):
        W = rng.normal(size=(7, 7))
        m = NilmModel.from_dense([W], [rng.normal(size=7)])
        for _ in range(2):
            np.testing.assert_array_equal(jacobian(m, rng.normal(size=7)).entries, W)

    def test_two_linear_layers(self, rng):
        W1, W2 = rng.normal(size=(9, 6)), rng.normal(size=(6, 9))
        m = NilmModel.from_dense([W1, W2], [np.zeros(9), np.zeros(6)])
        np.testing.assert_allclose(jacobian(m, rng.normal(size=6)).entries, W2 @ W1, atol=1e-12)

    def test_linear_fd_exact(self, rng):
        W = rng.normal(size=(5, 5))
        m = NilmModel.from_dense([W], [np.zeros(5)])
        np.testing.assert_allclose(jacobian_fd(m, rng.normal(size=5), 1e-4).entries, W, atol=1e-8)

    def test_fd_scalar_probe(self):
        d = fd_jacobian(lambda x: x**2, np.array([3.0]), 1e-4)
        assert abs(d[0, 0] - 6.0) < 1e-6

    def test_fd_bad_step(self):
        with pytest.raises(ConfigError):
            jacobian_fd(NilmModel.build(4), np.zeros(4), 0.0)

    def test_matches_fd_on_random_models(self):
        checked = 0
        for seed in range(40):
            m = NilmModel.build(32, seed=seed)
            x = np.random.default_rng(1000 + seed).normal(size=32)
            if not fd_stencil_is_smooth(m, x):
                continue
            J = jacobian(m, x).entries
            F = jacobian_fd(m, x, 1e-4).entries
            assert np.all(np.abs(J - F) <= 1e-4 * (1 + np.abs(F)))
            checked += 1
        assert checked >= 30

    def test_kink_detection(self):
        # a unit sitting exactly on its kink is flagged
        m = NilmModel.build(4, conv=((1, 1),), seed=0)
        m.layers[0].weight[:] = 1.0
        m.layers[0].bias[:] = 0.0
        assert not fd_stencil_is_smooth(m, np.array([0.0, 1.0, 1.0, 1.0]))
        assert fd_stencil_is_smooth(m, np.array([0.5, 1.0, 1.0, 1.0]))

    def test_fingerprint_tracks_input(self, rng):
        m = NilmModel.build(8)
        a, b = rng.normal(size=8), rng.normal(size=8)
        assert jacobian(m, a).input_fingerprint == jacobian(m, a.copy()).input_fingerprint
        assert jacobian(m, a).input_fingerprint != jacobian(m, b).input_fingerprint

    def test_relu_subgradient_is_zero(self):
        m = NilmModel.build(3, conv=((1, 1),), seed=0)
        m.layers[0].weight[:] = 1.0
        m.layers[0].bias[:] = 0.0
        m.layers[1].weight[:] = np.eye(3)
        J = jacobian(m, np.array([0.0, 2.0, -1.0])).entries
        np.testing.assert_array_equal(np.diag(J), [0.0, 1.0, 0.0])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        m = NilmModel.build(20, ((7, 3), (3, 4)), appliance_id="fridge", seed=9, norm_mean=0.1 + 0.2, norm_std=1 / 3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        assert back.checksum() == m.checksum()
        assert (back.norm_mean, back.norm_std) == (m.norm_mean, m.norm_std)
        assert (back.appliance_id, back.rng_seed, back.window_len) == ("fridge", 9, 20)
        assert back.architecture == m.architecture
        x = rng.normal(size=20)
        assert back(x).tobytes() == m(x).tobytes()

    def test_bytes_deterministic(self, tmp_path):
        save_checkpoint(NilmModel.build(16, seed=2), tmp_path / "a")
        save_checkpoint(NilmModel.build(16, seed=2), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "nope")

    def test_corrupt(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(b"garbage")
        with pytest.raises(DataError):
            load_checkpoint(p)
        save_checkpoint(NilmModel.build(8), p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(DataError):
            load_checkpoint(p)
