import numpy as np
import pytest

from dpnet import scores, systems, trainer
from dpnet.data import GeneratorData
from dpnet.features import FeatureMap, FeatureMapSpec

# 3-step trace on the quadratic (t1^2 + 4*t2^2)/2 from (1, 1), lr=0.1,
# frozen from an independent scalar recursion of the update rule
ADAM_GOLDEN = [
    (0.90000000099999999, 0.90000000024999993),
    (0.80041222971233816, 0.80041222818152014),
    (0.70158627450441502, 0.70158627216683789),
]


class TestAdamStep:
    def test_zero_gradient_keeps_params(self):
        params = np.array([1.0, -2.0])
        state = trainer.AdamState.zeros(2)
        new, state = trainer.adam_step(params, np.zeros(2), state, 0.1)
        assert np.array_equal(new, params)
        assert state.t == 1

    def test_constant_gradient_step_approaches_lr(self):
        # bias-corrected ratio tends to 1, so per-coordinate steps tend to lr
        params = np.zeros(3)
        state = trainer.AdamState.zeros(3)
        g = np.array([2.0, -0.5, 10.0])
        prev = params
        for _ in range(300):
            new, state = trainer.adam_step(prev, g, state, 1e-3)
            step = prev - new
            prev = new
        assert np.allclose(np.abs(step), 1e-3, rtol=1e-5)

    def test_golden_three_step_trace(self):
        theta = np.array([1.0, 1.0])
        state = trainer.AdamState.zeros(2)
        for expected in ADAM_GOLDEN:
            g = np.array([theta[0], 4.0 * theta[1]])
            theta, state = trainer.adam_step(theta, g, state, 0.1)
            assert np.allclose(theta, expected, rtol=0, atol=0)


class TestMinibatchSampler:
    def test_full_batch_is_permutation(self):
        batches = trainer.minibatch_sampler(8, 8, seed=0, epoch=0)
        assert batches.shape == (1, 8)
        assert sorted(batches[0]) == list(range(8))

    def test_deterministic(self):
        a = trainer.minibatch_sampler(20, 5, seed=3, epoch=7)
        b = trainer.minibatch_sampler(20, 5, seed=3, epoch=7)
        assert np.array_equal(a, b)
        c = trainer.minibatch_sampler(20, 5, seed=3, epoch=8)
        assert not np.array_equal(a, c)

    def test_drop_last(self):
        batches = trainer.minibatch_sampler(10, 3, seed=1, epoch=0)
        assert batches.shape == (3, 3)
        assert len(set(batches.ravel())) == 9

    def test_batch_larger_than_data(self):
        with pytest.raises(ValueError):
            trainer.minibatch_sampler(4, 8, seed=0, epoch=0)


def _linear_setup(seed=0, n=2048):
    sys_lin = systems.LinearSystem(a=(0.9, 0.5, 0.1), noise_std=0.3)
    data = sys_lin.sample_trajectory(n, seed=0)
    spec = FeatureMapSpec(3, (1,), ("identity",), seed=seed, use_bias=False)
    return data, FeatureMap.init(spec)


class TestTrain:
    def test_zero_learning_rate_keeps_params(self):
        data, fmap = _linear_setup()
        p0 = fmap.params.copy()
        cfg = trainer.TrainConfig(
            score="S", batch_size=256, epochs=2, learning_rate=0.0, tied=True
        )
        report = trainer.train(data, fmap, cfg)
        assert np.array_equal(fmap.params, p0)
        assert len(report.steps) == 2 * (data.n // 256)

    def test_one_step_score_equals_direct_evaluation(self):
        data, fmap = _linear_setup(seed=4)
        cfg = trainer.TrainConfig(
            score="S", gamma=0.0, batch_size=data.n, epochs=1,
            learning_rate=1e-3, seed=9, tied=True,
        )
        p0 = fmap.params.copy()
        report = trainer.train(data, fmap, cfg)
        idx = trainer.minibatch_sampler(data.n, data.n, seed=9, epoch=0)[0]
        probe = FeatureMap(fmap.spec, p0)
        psi, _ = probe.forward(data.x[idx])
        psi_p, _ = probe.forward(data.x_next[idx])
        direct = scores.score_S(scores.estimate_covariances(psi, psi_p), 0.0).total
        assert report.steps[0].value.total == pytest.approx(direct, abs=1e-12)

    def test_linear_system_converges_to_leading_direction(self):
        data, fmap = _linear_setup(seed=0, n=4096)
        cfg = trainer.TrainConfig(
            score="S", gamma=1.0, batch_size=512, epochs=200,
            learning_rate=2e-2, seed=0, tied=True,
        )
        trainer.train(data, fmap, cfg)
        w = fmap.params / np.linalg.norm(fmap.params)
        assert abs(w[0]) > 0.99

    def test_monotone_trend_across_seeds(self):
        data, _ = _linear_setup(n=2048)
        for seed in range(5):
            spec = FeatureMapSpec(3, (1,), ("identity",), seed=seed, use_bias=False)
            fmap = FeatureMap.init(spec)
            cfg = trainer.TrainConfig(
                score="S", gamma=1.0, batch_size=256, epochs=60,
                learning_rate=2e-2, seed=seed, tied=True,
            )
            report = trainer.train(data, fmap, cfg)
            totals = [rec.value.total for rec in report.steps]
            k = max(1, len(totals) // 10)
            assert np.median(totals[-k:]) > np.median(totals[:k])

    def test_reproducibility_bit_identical(self):
        def run():
            data, fmap = _linear_setup(seed=2, n=512)
            cfg = trainer.TrainConfig(
                score="S", batch_size=64, epochs=3, learning_rate=1e-2,
                seed=5, tied=True,
            )
            report = trainer.train(data, fmap, cfg)
            return fmap.params, report

        p1, r1 = run()
        p2, r2 = run()
        assert np.array_equal(p1, p2)
        rows1 = [row[:-1] for row in r1.log_rows()]  # drop wall_ms
        rows2 = [row[:-1] for row in r2.log_rows()]
        assert rows1 == rows2

    def test_untied_maps_move_independently(self):
        sys_lin = systems.LinearSystem(a=0.7, noise_std=0.1)
        data = sys_lin.sample_trajectory(512, seed=0)
        s1 = FeatureMapSpec(1, (4, 2), ("celu", "identity"), seed=1)
        s2 = FeatureMapSpec(1, (4, 2), ("celu", "identity"), seed=2)
        f1, f2 = FeatureMap.init(s1), FeatureMap.init(s2)
        cfg = trainer.TrainConfig(score="S", batch_size=128, epochs=3, learning_rate=1e-2)
        trainer.train(data, f1, cfg, fmap_prime=f2)
        assert not np.array_equal(f1.params, FeatureMap.init(s1).params)
        assert not np.array_equal(f2.params, FeatureMap.init(s2).params)

    def test_untied_requires_second_map(self):
        data, fmap = _linear_setup()
        cfg = trainer.TrainConfig(score="S", batch_size=128, epochs=1, learning_rate=1e-3)
        with pytest.raises(ValueError):
            trainer.train(data, fmap, cfg)

    def test_generator_score_needs_generator_data(self):
        data, fmap = _linear_setup()
        cfg = trainer.TrainConfig(score="generator", batch_size=64, epochs=1, learning_rate=1e-3)
        with pytest.raises(TypeError):
            trainer.train(data, fmap, cfg)

    def test_abort_report_on_numerical_blowup(self):
        data, fmap = _linear_setup()
        spec = FeatureMapSpec(3, (4, 2), ("identity", "identity"), seed=0)
        fmap = FeatureMap.init(spec)
        fmap2 = FeatureMap.init(FeatureMapSpec(3, (4, 2), ("identity", "identity"), seed=1))
        cfg = trainer.TrainConfig(
            score="P", gamma=1.0, batch_size=256, epochs=50, learning_rate=1e110,
        )
        report = trainer.train(data, fmap, cfg, fmap_prime=fmap2)
        assert report.aborted
        assert report.abort_step is not None
        assert report.abort_batch is not None and report.abort_batch.size == 256
        assert report.abort_params is not None
        assert "step" in report.abort_message

    def test_early_stopping_on_plateau(self):
        data, fmap = _linear_setup()
        cfg = trainer.TrainConfig(
            score="S", batch_size=256, epochs=50, learning_rate=0.0,
            tied=True, early_stop=True, patience=3, min_delta=1e-5,
        )
        report = trainer.train(data, fmap, cfg, val_data=data)
        assert report.stopped_early
        assert len(report.epoch_wall_s) < 50


class TestGeneratorTraining:
    def test_losses_finite_on_double_well(self, double_well_system):
        x = double_well_system.sample_states(512, seed=3, burn_in=2000, stride=5)
        data = GeneratorData(x, double_well_system.drift, double_well_system.diffusion)
        spec = FeatureMapSpec(1, (8, 3), ("celu", "identity"), seed=0)
        fmap = FeatureMap.init(spec)
        cfg = trainer.TrainConfig(
            score="generator", gamma=1.0, batch_size=64, epochs=10, learning_rate=1e-2,
        )
        report = trainer.train(data, fmap, cfg)
        assert not report.aborted
        assert all(np.isfinite(rec.value.total) for rec in report.steps)


class TestLossFiniteness:
    """No NaN/Inf over 500 steps with distortion penalties on, 5 seeds."""

    @pytest.mark.parametrize("seed", range(5))
    def test_linear(self, seed):
        data, _ = _linear_setup(n=512)
        spec = FeatureMapSpec(3, (4, 2), ("celu", "identity"), seed=seed)
        fmap = FeatureMap.init(spec)
        fmap2 = FeatureMap.init(
            FeatureMapSpec(3, (4, 2), ("celu", "identity"), seed=seed + 100)
        )
        cfg = trainer.TrainConfig(
            score="S", gamma=1.0, batch_size=64, epochs=63, learning_rate=5e-3, seed=seed
        )
        report = trainer.train(data, fmap, cfg, fmap_prime=fmap2)
        assert not report.aborted
        assert len(report.steps) >= 500
        assert all(np.isfinite(rec.value.total) for rec in report.steps[:500])

    @pytest.mark.parametrize("seed", range(5))
    def test_logistic(self, seed):
        data = systems.LogisticMapSystem().sample_trajectory(512, seed=seed)
        spec = FeatureMapSpec(1, (8, 4), ("leaky_relu", "identity"), seed=seed)
        fmap = FeatureMap.init(spec)
        fmap2 = FeatureMap.init(
            FeatureMapSpec(1, (8, 4), ("leaky_relu", "identity"), seed=seed + 100)
        )
        cfg = trainer.TrainConfig(
            score="P", gamma=1.0, batch_size=64, epochs=63, learning_rate=5e-3, seed=seed
        )
        report = trainer.train(data, fmap, cfg, fmap_prime=fmap2)
        assert not report.aborted
        assert all(np.isfinite(rec.value.total) for rec in report.steps[:500])

    @pytest.mark.parametrize("seed", range(5))
    def test_langevin_generator(self, seed, double_well_system):
        x = double_well_system.sample_states(512, seed=seed, burn_in=2000, stride=5)
        data = GeneratorData(x, double_well_system.drift, double_well_system.diffusion)
        spec = FeatureMapSpec(1, (8, 4), ("celu", "identity"), seed=seed)
        fmap = FeatureMap.init(spec)
        cfg = trainer.TrainConfig(
            score="generator", gamma=1.0, batch_size=64, epochs=63,
            learning_rate=5e-3, seed=seed,
        )
        report = trainer.train(data, fmap, cfg)
        assert not report.aborted
        assert all(np.isfinite(rec.value.total) for rec in report.steps[:500])


class TestConfigValidation:
    def test_bad_score(self):
        with pytest.raises(ValueError):
            trainer.TrainConfig(score="vamp")

    def test_batch_too_small(self):
        with pytest.raises(ValueError):
            trainer.TrainConfig(batch_size=1)

    def test_negative_gamma(self):
        with pytest.raises(ValueError):
            trainer.TrainConfig(gamma=-0.1)

    def test_negative_lr(self):
        with pytest.raises(ValueError):
            trainer.TrainConfig(learning_rate=-1e-3)
