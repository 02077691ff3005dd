import numpy as np
import pytest
from scipy import stats

from fedmix.mixture import MixtureParams, sample_data
from fedmix.sampler import CHUNK, SamplerConfig, cluster_fraction, mixture_score, model_score, reverse_sample
from fedmix.score import ScoreParams


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(n_steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(t_start=1.0, t_end=2.0)


def test_zero_length_integration_returns_initialization():
    cfg = SamplerConfig(n_steps=10, t_start=1.0 + 1e-8, t_end=1.0)
    x = reverse_sample(mixture_score(MixtureParams([4.0], 0.7)), cfg, 500, 1, seed=3)
    init = np.random.default_rng([3, 7, 0]).standard_normal((500, 1))
    assert np.max(np.abs(x - init)) < 1e-3


def test_single_gaussian_target():
    # w = 1 makes the reverse SDE an exact OU reversal towards N(2, 1)
    params = MixtureParams([2.0], 1.0)
    with pytest.warns(UserWarning):
        x = reverse_sample(mixture_score(params), SamplerConfig(), 10_000, 1, seed=1)
    se = x.std(ddof=1) / np.sqrt(len(x))
    assert abs(x.mean() - 2.0) < 3 * se
    assert x.var() == pytest.approx(1.0, rel=0.10)


def test_mixture_cluster_fraction():
    x = reverse_sample(mixture_score(MixtureParams([4.0], 0.7)), SamplerConfig(), 10_000, 1, seed=2)
    assert abs(cluster_fraction(x, [4.0]) - 0.7) <= 0.02


def test_model_score_at_truth_matches_true_score_sampler():
    params = MixtureParams([1.0, -2.0], 0.4)
    cfg = SamplerConfig(n_steps=50)
    a = reverse_sample(mixture_score(params), cfg, 300, 2, seed=5)
    b = reverse_sample(model_score(ScoreParams.from_mixture(params)), cfg, 300, 2, seed=5)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


def test_ks_against_direct_samples():
    params = MixtureParams([4.0], 0.7)
    x = reverse_sample(mixture_score(params), SamplerConfig(n_steps=1000), 10_000, 1, seed=4)
    direct, _ = sample_data(params, 10_000, np.random.default_rng(5))
    assert stats.ks_2samp(x[:, 0], direct[:, 0]).pvalue >= 1e-3


def test_chunking_keeps_rows_stable():
    score = mixture_score(MixtureParams([4.0], 0.7))
    cfg = SamplerConfig(n_steps=20)
    small = reverse_sample(score, cfg, CHUNK, 1, seed=9)
    big = reverse_sample(score, cfg, 2 * CHUNK + 5, 1, seed=9)
    assert np.array_equal(small, big[:CHUNK])


def test_divergence_reports_step():
    with pytest.raises(FloatingPointError, match="step"):
        with np.errstate(all="ignore"):
            reverse_sample(lambda t, x: 1e308 * np.ones_like(x), SamplerConfig(n_steps=5), 4, 1)


def test_cluster_fraction_examples():
    mu = np.array([1.0, 2.0])
    assert cluster_fraction(np.vstack([mu, -mu]), mu) == 0.5
    assert cluster_fraction(np.tile(mu, (5, 1)), mu) == 1.0
    direct, _ = sample_data(MixtureParams(np.array([4.0]), 0.7), 10_000, np.random.default_rng(6))
    assert abs(cluster_fraction(direct, [4.0]) - 0.7) <= 0.02
    with pytest.raises(ValueError):
        cluster_fraction(direct, [0.0])
