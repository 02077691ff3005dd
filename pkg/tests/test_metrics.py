from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate

from fedmix.metrics import (DEFAULT_T_GRID, ScalingRow, loglog_slopes, median_grid, pretrain_and_personalize,
                            score_error, theorem2_scaling_study)
from fedmix.mixture import MixtureParams, log_density_at_time, weight_bias
from fedmix.score import ScoreParams, weight_to_logit
from fedmix.verify import DECAYED_FT, SCALING_BASE


def test_truth_has_zero_error():
    truth = MixtureParams([1.0, 2.0], 0.3)
    est = score_error(truth, ScoreParams.from_mixture(truth), mc_samples=2000, rng=np.random.default_rng(0))
    assert est.value < 3 * est.std_error + 1e-24
    assert est.value == pytest.approx(0.0, abs=1e-20)


def test_mc_samples_floor():
    with pytest.raises(ValueError):
        score_error(MixtureParams([1.0], 0.5), ScoreParams([1.0], 0.0), mc_samples=10)


def test_quadratic_local_behavior():
    truth = MixtureParams([2.0, -1.0], 0.6)
    vals = []
    for eps in (1e-1, 1e-2, 1e-3):
        est = ScoreParams(truth.mu + np.array([eps, 0.0]), weight_bias(0.6))
        vals.append(score_error(truth, est, mc_samples=4000, rng=np.random.default_rng(1)).value)
    assert vals[1] / vals[0] == pytest.approx(1e-2, rel=0.2)
    assert vals[2] / vals[1] == pytest.approx(1e-2, rel=0.05)


def quadrature_score_error(truth, mu_hat, w_hat, t_grid):
    mu, w = truth.mu[0], truth.w
    b, b_hat = weight_bias(w), weight_to_logit(w_hat)
    vals = []
    for t in t_grid:
        a = np.exp(-t)

        def integrand(x):
            gap = np.tanh(a * mu * x + b) * a * mu - np.tanh(a * mu_hat * x + b_hat) * a * mu_hat
            return np.exp(log_density_at_time(truth, t, np.array([x]))) * gap**2

        c = a * mu
        v = integrate.quad(integrand, -c - 12, c + 12, points=[-c, 0.0, c], epsabs=1e-14, epsrel=1e-11,
                           limit=400)[0]
        vals.append(v)
    return float(np.mean(vals))


def test_matches_quadrature_oracle():
    truth = MixtureParams([4.0], 0.7)
    est = ScoreParams([4.11], weight_to_logit(0.72))
    mc = score_error(truth, est, mc_samples=50_000, rng=np.random.default_rng(2))
    oracle = quadrature_score_error(truth, 4.11, 0.72, DEFAULT_T_GRID)
    assert abs(mc.value - oracle) < 3 * mc.std_error


def test_slopes_recover_planted_power_law():
    rows = [ScalingRow(m, n, 8, s, 3.0 / (m * n) * (1 + 0.01 * s), 0.0)
            for m in (2, 4, 8) for n in (50, 100, 200) for s in range(5)]
    fit = loglog_slopes(rows)
    assert all(v == pytest.approx(-1.0, abs=1e-9) for v in fit["slope_n"].values())
    assert all(v == pytest.approx(-1.0, abs=1e-9) for v in fit["slope_m"].values())
    assert len(median_grid(rows)) == 9


def test_study_requires_grid_and_seeds():
    with pytest.raises(ValueError):
        theorem2_scaling_study((2, 4), (50, 100, 200), SCALING_BASE, DECAYED_FT, range(5))
    with pytest.raises(ValueError):
        theorem2_scaling_study((2, 4, 8), (50, 100, 200), SCALING_BASE, DECAYED_FT, range(3))


def test_error_does_not_drop_when_dimension_doubles():
    base = replace(SCALING_BASE, m=4, n=100, K=1000)
    med = {}
    for d in (4, 8):
        vals = [pretrain_and_personalize(replace(base, d=d, seed=s), DECAYED_FT, 0.8, mc_samples=2000)[0].value
                for s in range(5)]
        med[d] = np.median(vals)
    assert med[8] >= med[4]
