import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from meterguard.attack import (
    AttackConfig,
    Perturbation,
    apply_perturbation,
    attack_fgsm,
    attack_go,
    attack_laplace,
    attack_pgd,
    exact_norm,
    jaco_adam,
    jaco_adam_practical,
    objective_ratio,
    read_perturbation_dump,
    write_perturbation_dump,
)
from meterguard.errors import ConfigError, DegenerateInputError, ShapeError, SizeLimitError
from meterguard.model import NilmModel, jacobian
from meterguard.signal import Unit, Window

finite = st.floats(-1e3, 1e3, allow_nan=False)


def brute_force_norm(J):
    """Independent oracle: every sign vector, no symmetry tricks."""
    return max(np.abs(J @ np.array(s)).sum() for s in itertools.product((1.0, -1.0), repeat=J.shape[1]))


def nwin(values):
    return Window(values, 0, Unit.NORMALIZED)


class TestObjectiveRatio:
    def test_identity(self):
        assert objective_ratio(np.eye(3), [1, 1, 1]) == 3

    def test_scalar(self):
        assert objective_ratio([[-2.5]], [1.0]) == 2.5

    def test_two_by_two(self):
        assert objective_ratio([[1, -1], [1, -1]], [1, -1]) == 4

    def test_zero_vector(self):
        with pytest.raises(DegenerateInputError):
            objective_ratio(np.eye(2), [0.0, 0.0])

    def test_shape(self):
        with pytest.raises(ShapeError):
            objective_ratio(np.eye(3), [1.0, 1.0])

    @given(
        arrays(np.float64, (6, 6), elements=finite),
        arrays(np.float64, 6, elements=st.floats(-10, 10)),
        st.sampled_from([1e-3, -1.0, 7.0, 1e3]),
    )
    def test_scale_invariance(self, J, e, c):
        if np.max(np.abs(e)) < 1e-6:
            return
        a, b = objective_ratio(J, c * e), objective_ratio(J, e)
        assert abs(a - b) <= 1e-9 * max(abs(b), 1e-300)


class TestExactNorm:
    def test_identity(self):
        val, s = exact_norm(np.eye(5))
        assert val == 5
        np.testing.assert_array_equal(s, np.ones(5))

    def test_diag(self):
        assert exact_norm(np.diag([3.0, 1.0]))[0] == 4

    @pytest.mark.parametrize("w", [1, 3, 6, 9])
    def test_matches_brute_force(self, rng, w):
        J = rng.normal(size=(w + 1, w))
        val, s = exact_norm(J)
        assert val == pytest.approx(brute_force_norm(J), rel=1e-12)
        assert np.sum(np.abs(J @ s)) == pytest.approx(val, rel=1e-12)

    def test_small_chunks_agree(self, rng):
        J = rng.normal(size=(11, 11))
        a, sa = exact_norm(J, chunk=7)
        b, sb = exact_norm(J)
        assert a == b
        np.testing.assert_array_equal(sa, sb)

    def test_lower_bounds_random_sampling(self, rng):
        J = rng.normal(size=(8, 8))
        val, _ = exact_norm(J)
        for e in rng.uniform(-1, 1, size=(1000, 8)):
            assert val >= objective_ratio(J, e) - 1e-12

    def test_size_guard(self):
        with pytest.raises(SizeLimitError):
            exact_norm(np.eye(21))


def _check_perturbation(J, p, zero_sum=False):
    d = p.direction
    assert abs(np.max(np.abs(d)) - 1.0) <= 1e-12
    assert p.achieved_ratio == pytest.approx(objective_ratio(J, d), rel=1e-9)
    assert p.achieved_ratio == pytest.approx(max(p.ratio_history), rel=0)
    if zero_sum:
        assert abs(d.sum()) <= 1e-9 * d.size


class TestJacoAdam:
    def test_scalar(self):
        p = jaco_adam(np.array([[-3.0]]), AttackConfig(num_iters=10))
        assert abs(p.direction[0]) == 1.0
        assert p.achieved_ratio == 3.0

    def test_identity_reaches_exact(self):
        J = np.eye(8)
        p = jaco_adam(J, AttackConfig(num_iters=200, seed=0))
        assert p.achieved_ratio >= 0.9 * exact_norm(J)[0]
        _check_perturbation(J, p)

    def test_contracts_and_upper_bound(self, rng):
        for k in range(10):
            J = rng.normal(size=(10, 10))
            p = jaco_adam(J, AttackConfig(num_iters=50, seed=k))
            _check_perturbation(J, p)
            assert p.achieved_ratio <= exact_norm(J)[0] + 1e-9
            assert p.achieved_ratio >= p.ratio_history[0]
            assert len(p.ratio_history) == 51

    def test_seeded(self, rng):
        J = rng.normal(size=(6, 6))
        a = jaco_adam(J, AttackConfig(num_iters=20, seed=5))
        b = jaco_adam(J, AttackConfig(num_iters=20, seed=5))
        assert a.direction.tobytes() == b.direction.tobytes()

    def test_rejects_zero_sum_config(self):
        with pytest.raises(ConfigError):
            jaco_adam(np.eye(2), AttackConfig(zero_sum=True))

    @pytest.mark.xfail(
        strict=True,
        reason="single-start Adam ascent stalls at local vertices; ~12/20 reach 0.9 of the optimum",
    )
    def test_random_jacobians_near_optimal(self):
        hits = 0
        for k in range(20):
            J = np.random.default_rng(100 + k).normal(size=(12, 12))
            p = jaco_adam(J, AttackConfig(num_iters=200, seed=k))
            hits += p.achieved_ratio >= 0.9 * exact_norm(J)[0]
        assert hits >= 18

    @pytest.mark.parametrize(
        "kwargs",
        [dict(delta=0), dict(num_iters=0), dict(lr=0), dict(beta1=1.0), dict(beta2=-0.1), dict(epsilon=0)],
    )
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigError):
            AttackConfig(**kwargs)


class TestJacoAdamPractical:
    def test_zero_sum_by_construction(self, rng):
        for k in range(20):
            J = rng.normal(size=(16, 16))
            p = jaco_adam_practical(J, AttackConfig(num_iters=k + 1, zero_sum=True, seed=k))
            _check_perturbation(J, p, zero_sum=True)
            assert p.zero_sum

    def test_two_dimensional_optimum(self):
        J = np.array([[1.0, -1.0], [0.0, 0.0]])
        # the zero-sum unit-infinity vertices in 2-D are exactly +-(1, -1)
        best = max(objective_ratio(J, v) for v in ([1.0, -1.0], [-1.0, 1.0]))
        assert best == 2.0
        p = jaco_adam_practical(J, AttackConfig(num_iters=200, zero_sum=True))
        assert p.achieved_ratio >= 0.9 * best

    @pytest.mark.xfail(
        strict=True,
        reason="the constant -sum(e) gradient term dominates Adam's normalized step and stalls the "
        "projected iterate when |d ratio / d e_i| < 1",
    )
    def test_beats_random_search(self):
        J = np.random.default_rng(0).normal(size=(10, 10))
        p = jaco_adam_practical(J, AttackConfig(num_iters=200, zero_sum=True, seed=0))
        samples = np.random.default_rng(1000).uniform(-1, 1, size=(10_000, 10))
        samples -= samples.mean(axis=1, keepdims=True)
        samples /= np.max(np.abs(samples), axis=1, keepdims=True)
        best = np.abs(samples @ J.T).sum(axis=1).max()
        assert p.achieved_ratio >= 0.95 * best

    def test_requires_zero_sum(self):
        with pytest.raises(ConfigError):
            jaco_adam_practical(np.eye(2), AttackConfig())


class TestApplyPerturbation:
    def test_zero_delta(self, rng):
        x = nwin(rng.normal(size=4))
        p = Perturbation([1.0, -1.0, 0.5, 0.0], 1.0)
        np.testing.assert_array_equal(apply_perturbation(x, p, 0.0).values, x.values)

    def test_arithmetic(self):
        out = apply_perturbation(nwin([0.5, 0.5]), Perturbation([1.0, -1.0], 2.0, True), 0.1)
        np.testing.assert_allclose(out.values, [0.6, 0.4], rtol=0, atol=1e-15)
        assert out.values.sum() == pytest.approx(1.0, abs=1e-15)

    def test_clamp(self):
        out = apply_perturbation(nwin([-1.0, 0.0]), Perturbation([-1.0, 1.0], 1.0), 0.5, True, zero_level=-1.2)
        np.testing.assert_array_equal(out.values, [-1.2, 0.5])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            apply_perturbation(nwin([0.0, 0.0, 0.0]), Perturbation([1.0, -1.0], 1.0), 0.1)

    def test_zero_sum_billing_property(self, rng):
        for k in range(100):
            w = int(rng.integers(2, 64))
            x = nwin(rng.uniform(0.5, 3.0, size=w))
            p = jaco_adam_practical(rng.normal(size=(w, w)), AttackConfig(num_iters=3, zero_sum=True, seed=k))
            delta = float(rng.uniform(0.01, 0.3))
            out = apply_perturbation(x, p, delta).values
            assert np.max(np.abs(out - x.values)) <= delta * (1 + 1e-12)
            assert abs(out.sum() - x.values.sum()) / abs(x.values.sum()) <= 1e-9

    @settings(max_examples=50)
    @given(arrays(np.float64, 12, elements=st.floats(-5, 5)), st.floats(0.001, 10))
    def test_zero_sum_closure(self, e, scale):
        centred = e - e.mean()
        if np.max(np.abs(centred)) < 1e-9:
            return
        d = scale * centred / np.max(np.abs(centred))
        assert abs(d.sum()) <= 1e-9 * max(1.0, scale) * d.size


class TestBaselines:
    def test_fgsm_zero_delta(self, rng):
        m = NilmModel.build(8, seed=0)
        x, y = rng.normal(size=8), rng.normal(size=8)
        np.testing.assert_array_equal(attack_fgsm(m, x, y, 0.0), x)

    def test_fgsm_closed_form(self, rng):
        m = NilmModel.from_dense([np.eye(6)], [np.zeros(6)])
        x = rng.normal(size=6)
        np.testing.assert_array_equal(attack_fgsm(m, x, np.zeros(6), 0.1), x + 0.1 * np.sign(x))

    def test_fgsm_accepts_windows(self, rng):
        m = NilmModel.from_dense([np.eye(4)], [np.zeros(4)])
        out = attack_fgsm(m, nwin([1.0, -1.0, 2.0, -2.0]), nwin(np.zeros(4)), 0.5)
        np.testing.assert_array_equal(out.values, [1.5, -1.5, 2.5, -2.5])

    def test_pgd_one_step_is_fgsm(self, rng):
        m = NilmModel.build(16, seed=3)
        x, y = rng.normal(size=16), rng.normal(size=16)
        np.testing.assert_array_equal(attack_pgd(m, x, y, 0.2, steps=1, step_size=0.2), attack_fgsm(m, x, y, 0.2))

    def test_pgd_stays_in_ball(self, rng):
        m = NilmModel.build(16, seed=3)
        x, y = rng.normal(size=16), rng.normal(size=16)
        for steps in range(1, 12):
            adv = attack_pgd(m, x, y, 0.1, steps=steps, step_size=0.07)
            assert np.max(np.abs(adv - x)) <= 0.1 * (1 + 1e-12)

    def test_pgd_bad_steps(self):
        with pytest.raises(ConfigError):
            attack_pgd(NilmModel.build(4), np.zeros(4), np.zeros(4), 0.1, steps=0)

    def test_go_signs_are_negations(self, rng):
        m = NilmModel.build(16, seed=2)
        zero = np.zeros(16)
        np.testing.assert_array_equal(attack_go(m, zero, 0.1, "+"), -attack_go(m, zero, 0.1, "-"))
        x = rng.normal(size=16)
        up, down = attack_go(m, x, 0.1, "+") - x, attack_go(m, x, 0.1, "-") - x
        np.testing.assert_allclose(up, -down, rtol=0, atol=1e-15)
        assert np.max(np.abs(up)) == pytest.approx(0.1, rel=1e-14)

    def test_go_linear_closed_form(self, rng):
        W = rng.normal(size=(5, 5))
        m = NilmModel.from_dense([W], [np.zeros(5)])
        x = rng.normal(size=5)
        cols = W.sum(axis=0)
        np.testing.assert_allclose(attack_go(m, x, 0.2, "+") - x, 0.2 * cols / np.max(np.abs(cols)), atol=1e-15)

    def test_go_bad_sign(self):
        with pytest.raises(ConfigError):
            attack_go(NilmModel.build(4), np.zeros(4), 0.1, "*")

    def test_laplace_reproducible(self, rng):
        x = rng.normal(size=32)
        assert attack_laplace(x, 0.5, 1.0, seed=3).tobytes() == attack_laplace(x, 0.5, 1.0, seed=3).tobytes()

    def test_laplace_statistics(self):
        n, eps, sens = 100_000, 0.01, 2.0
        noise = attack_laplace(np.zeros(n), eps, sens, seed=11)
        scale = sens / eps
        stderr = np.sqrt(2.0) * scale / np.sqrt(n)
        assert abs(noise.mean()) <= 3 * stderr
        assert abs(np.mean(np.abs(noise)) - scale) <= 0.05 * scale

    @pytest.mark.parametrize("eps,sens", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
    def test_laplace_bad_parameters(self, eps, sens):
        with pytest.raises(ConfigError):
            attack_laplace(np.zeros(3), eps, sens)


@pytest.fixture(scope="module")
def batch(house, source_models):
    from meterguard.experiment import eval_starts, gather

    m = source_models["fridge"]
    starts = eval_starts(house, m.window_len)[:40]
    x = (gather(house.scene.aggregate.power, starts, m.window_len) - m.norm_mean) / m.norm_std
    y = (gather(house.scene.appliances["fridge"].power, starts, m.window_len) - m.norm_mean) / m.norm_std
    return m, x, y


@pytest.mark.slow
class TestOnTrainedModel:
    """Baselines against the session-trained fridge model on held-out windows."""

    @staticmethod
    def _mse(m, xs, y):
        return float(np.mean((m.forward_batch(np.asarray(xs)) - y) ** 2))

    def test_fgsm_increases_mse(self, batch):
        m, x, y = batch
        adv = [attack_fgsm(m, xi, yi, 0.05) for xi, yi in zip(x, y)]
        assert self._mse(m, adv, y) >= self._mse(m, x, y)

    def test_pgd_at_least_fgsm(self, batch):
        m, x, y = batch
        fgsm = [attack_fgsm(m, xi, yi, 0.1) for xi, yi in zip(x, y)]
        pgd = [attack_pgd(m, xi, yi, 0.1, steps=10) for xi, yi in zip(x, y)]
        assert self._mse(m, pgd, y) >= self._mse(m, fgsm, y)

    def test_go_moves_predicted_total(self, batch):
        m, x, _ = batch
        base = m.forward_batch(x).sum()
        up = m.forward_batch(np.array([attack_go(m, xi, 0.1, "+") for xi in x])).sum()
        down = m.forward_batch(np.array([attack_go(m, xi, 0.1, "-") for xi in x])).sum()
        assert up > base > down

    def test_jacobian_attack_contracts(self, batch):
        m, x, _ = batch
        for k, xi in enumerate(x[:10]):
            J = jacobian(m, xi)
            for p in (
                jaco_adam(J, AttackConfig(seed=k)),
                jaco_adam_practical(J, AttackConfig(seed=k, zero_sum=True)),
            ):
                _check_perturbation(J.entries, p, p.zero_sum)


def test_dump_round_trip(tmp_path, rng):
    ps = [
        Perturbation(rng.uniform(-1, 1, 5), float(rng.uniform(1, 9)), bool(k % 2), start=64 * k)
        for k in range(4)
    ]
    path = tmp_path / "dump.csv"
    write_perturbation_dump(path, ps)
    back = read_perturbation_dump(path)
    for a, b in zip(ps, back):
        assert (a.start, a.achieved_ratio, a.zero_sum) == (b.start, b.achieved_ratio, b.zero_sum)
        assert a.direction.tobytes() == b.direction.tobytes()
