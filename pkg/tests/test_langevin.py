import csv

import numpy as np
import pytest

from scorevc.errors import NumericalError, ValidationError
from scorevc.evaluation import gaussian_score, mixture_score
from scorevc.langevin import (
    LangevinConfig,
    annealed_langevin,
    convert,
    sample,
    step_size,
    write_trajectory_csv,
)
from scorevc.noise import NoiseSchedule, geometric_schedule
from scorevc.score_net import ScoreNetConfig, init_params


@pytest.fixture(scope="module")
def tiny_params():
    cfg = ScoreNetConfig(feature_dim=2, noise_levels=11, speakers=2, base_channels=4, depth=2, max_channels=8)
    return init_params(cfg, np.random.default_rng(0))


def zero_score(x, level, k):
    return np.zeros_like(x)


class TestStepSize:
    def test_examples(self):
        assert step_size(1e-5, 1.0, 0.01) == pytest.approx(0.1, rel=1e-12)
        assert step_size(1e-5, 0.01, 0.01) == 1e-5

    def test_scales_with_sigma_squared(self, default_schedule):
        sig = default_schedule.as_array()
        alphas = np.array([step_size(2e-5, s, sig[-1]) for s in sig])
        np.testing.assert_allclose(alphas / sig**2, alphas[0] / sig[0] ** 2, rtol=1e-12)


class TestAnnealedLangevin:
    def test_evaluation_count(self, default_schedule):
        res = annealed_langevin(zero_score, np.zeros((1, 1, 2, 4)), default_schedule, LangevinConfig(), 1)
        assert res.evaluations == (11 - 4 + 1) * 120 == 960

    def test_zero_score_is_fixed_point(self, default_schedule, rng):
        x0 = rng.standard_normal((1, 1, 3, 8))
        res = annealed_langevin(zero_score, x0, default_schedule, LangevinConfig(start_level=1), 1)
        np.testing.assert_array_equal(res.x, x0)

    def test_gaussian_closed_form_residual(self, default_schedule):
        """Noiseless updates with score -(x - mu)/v contract by (1 - alpha/v) per step."""
        mu, v = 0.7, 4.0
        cfg = LangevinConfig(epsilon=1e-5, steps_per_level=120, start_level=11)
        seen = []

        def score(x, level, k):
            seen.append(x.copy())
            return -(x - mu) / v

        x0 = np.array([[[[3.0, -1.0, 0.25]]]])
        res = annealed_langevin(score, x0, default_schedule, cfg, 1)
        alpha = step_size(cfg.epsilon, default_schedule.sigma(11), default_schedule.sigma(11))
        for t, x in enumerate(seen):
            np.testing.assert_allclose(x - mu, (1 - alpha / v) ** t * (x0 - mu), rtol=0, atol=1e-10)
        np.testing.assert_allclose(res.x - mu, (1 - alpha / v) ** 120 * (x0 - mu), rtol=0, atol=1e-10)

    def test_log_density_monotone_without_noise(self, rng):
        schedule = geometric_schedule(1.0, 0.1, 4)
        mean, cov = np.array([1.0, -2.0]), np.diag([0.5, 2.0])
        values = []

        def score(x, level, k):
            pts = x.reshape(2, -1)
            d = pts - mean[:, None]
            values.append(-0.5 * np.einsum("im,ij,jm->m", d, np.linalg.inv(cov), d).sum())
            return gaussian_score(pts, mean, cov).reshape(x.shape)

        cfg = LangevinConfig(epsilon=1e-3, steps_per_level=30, start_level=1)
        annealed_langevin(score, rng.standard_normal((1, 1, 2, 5)) * 3, schedule, cfg, 1)
        assert np.all(np.diff(values) >= -1e-12)

    def test_noise_variance(self, rng):
        """With a zero score one noisy step adds variance 2 * alpha."""
        schedule = NoiseSchedule((0.5, 0.05))
        cfg = LangevinConfig(epsilon=1e-4, steps_per_level=1, start_level=2, noisy=True, seed=3)
        res = annealed_langevin(zero_score, np.zeros((1, 1, 50, 400)), schedule, cfg, 1)
        alpha = step_size(1e-4, 0.05, 0.05)
        assert res.x.var() == pytest.approx(2 * alpha, rel=0.03)

    def test_same_seed_same_result(self, rng):
        schedule = geometric_schedule(1.0, 0.1, 3)
        cfg = LangevinConfig(epsilon=1e-3, steps_per_level=5, start_level=1, noisy=True, seed=7)
        x0 = rng.standard_normal((1, 1, 2, 6))
        a = annealed_langevin(lambda x, l, k: -x, x0, schedule, cfg, 1).x
        b = annealed_langevin(lambda x, l, k: -x, x0, schedule, cfg, 1).x
        np.testing.assert_array_equal(a, b)

    def test_divergence_names_level_and_step(self):
        schedule = geometric_schedule(1.0, 0.1, 3)
        cfg = LangevinConfig(epsilon=1.0, steps_per_level=50, start_level=2)
        with np.errstate(over="ignore"), pytest.raises(NumericalError, match=r"level 2, step \d+"):
            annealed_langevin(lambda x, l, k: x * 1e200, np.ones((1, 1, 1, 2)), schedule, cfg, 1)

    def test_start_level_beyond_schedule(self):
        with pytest.raises(ValidationError):
            annealed_langevin(zero_score, np.zeros((1, 1, 1, 2)), geometric_schedule(1.0, 0.1, 3),
                              LangevinConfig(start_level=4), 1)

    @pytest.mark.parametrize("field,value", [("epsilon", 0.0), ("steps_per_level", 0), ("start_level", 0)])
    def test_config_validation(self, field, value):
        with pytest.raises(ValidationError):
            LangevinConfig(**{field: value})

    def test_trajectory_recording(self, tmp_path, default_schedule):
        cfg = LangevinConfig(steps_per_level=20, start_level=10, record_trajectory=True)
        res = annealed_langevin(lambda x, l, k: -x, np.ones((1, 1, 2, 3)), default_schedule, cfg, 1)
        # step 1 plus every second step, for two levels
        assert len(res.trajectory) == 2 * 11
        path = tmp_path / "traj.csv"
        write_trajectory_csv(path, res.trajectory)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["level", "step", "frame", "score_log_norm"]
        assert len(rows) == 1 + 22 * 3
        np.testing.assert_allclose(float(rows[1][3]), np.log(np.sqrt(2.0)))


class TestConvert:
    def test_zero_score_identity(self, tiny_params, default_schedule, rng):
        x = rng.standard_normal((2, 13))
        out, res = convert(tiny_params, x, 2, default_schedule, LangevinConfig(), score_fn=zero_score)
        np.testing.assert_array_equal(out, x)
        assert res.evaluations == 960

    def test_shape_preserved_and_deterministic(self, tiny_params, default_schedule, rng):
        x = rng.standard_normal((2, 21))
        cfg = LangevinConfig(steps_per_level=3)
        a, _ = convert(tiny_params, x, 1, default_schedule, cfg)
        b, _ = convert(tiny_params, x, 1, default_schedule, cfg)
        assert a.shape == x.shape
        np.testing.assert_array_equal(a, b)

    def test_rejects_bad_speaker_and_shape(self, tiny_params, default_schedule):
        with pytest.raises(ValidationError, match="out of range"):
            convert(tiny_params, np.zeros((2, 4)), 3, default_schedule, LangevinConfig())
        with pytest.raises(ValidationError):
            convert(tiny_params, np.zeros((3, 4)), 1, default_schedule, LangevinConfig())


class TestSample:
    def test_analytic_mixture_sampling_finds_both_modes(self, tiny_params):
        """Full annealing with the exact smoothed mixture score covers both modes."""
        schedule = geometric_schedule(3.0, 0.05, 8)
        means = [np.array([-2.0, 0.0]), np.array([2.0, 0.0])]
        covs = [np.eye(2) * 0.25, np.eye(2) * 0.25]

        def score(x, level, k):
            pts = x.reshape(2, -1)
            return mixture_score(pts, means, covs, [0.5, 0.5], schedule.sigma(level)).reshape(x.shape)

        cfg = LangevinConfig.for_sampling(epsilon=2e-4, steps_per_level=60, seed=1)
        xs = sample(tiny_params, (2, 1000), 1, schedule, cfg, score_fn=score)
        right = xs[0] > 0
        assert 0.2 <= right.mean() <= 0.8
        np.testing.assert_allclose(xs[:, right].mean(1), means[1], atol=0.15)
        np.testing.assert_allclose(xs[:, ~right].mean(1), means[0], atol=0.15)

    def test_shapes(self, tiny_params, default_schedule):
        cfg = LangevinConfig.for_sampling(steps_per_level=1)
        assert sample(tiny_params, (2, 5), 1, default_schedule, cfg, score_fn=zero_score).shape == (2, 5)
        assert sample(tiny_params, (3, 2, 5), 1, default_schedule, cfg, score_fn=zero_score).shape == (3, 2, 5)
        with pytest.raises(ValidationError):
            sample(tiny_params, (5,), 1, default_schedule, cfg)

    def test_for_sampling_defaults(self):
        cfg = LangevinConfig.for_sampling(seed=4)
        assert cfg.start_level == 1 and cfg.noisy and cfg.seed == 4
        assert LangevinConfig().start_level == 4 and not LangevinConfig().noisy


@pytest.mark.slow
class TestTrainedMixture:
    def test_sampling_coverage(self, mixture_report):
        for k in (1, 2):
            assert mixture_report.coverage[k] >= 0.8
            assert mixture_report.sample_mean_error[k] < 0.5

    def test_conversion_moves_toward_target(self, mixture_report):
        assert mixture_report.conversion_gain > 0
