"""Score-estimation error between the true and a learned score, and its scaling study."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .federated import FedConfig, flip_sign, keyed_rng, make_truth, run_pretraining
from .mixture import MixtureParams, forward_noise, sample_data, weight_bias
from .personalize import FinetuneConfig, finetune_new_client
from .score import ScoreParams

DEFAULT_T_GRID = np.geomspace(0.05, 3.0, 16)


@dataclass
class ScoreErrorEstimate:
    value: float
    mc_samples: int
    t_grid: np.ndarray
    std_error: float


def score_gap(truth: MixtureParams, est: ScoreParams, t: float, xt: np.ndarray) -> np.ndarray:
    """Per-row squared gap of the tanh terms; the ``-x`` skip paths cancel."""
    a = np.exp(-t)
    m, m_hat = a * truth.mu, a * est.mu_hat
    u = xt @ m + weight_bias(truth.w)
    u_hat = xt @ m_hat + est.logit
    diff = np.tanh(u)[:, None] * m - np.tanh(u_hat)[:, None] * m_hat
    return np.sum(diff**2, axis=1)


def score_error(truth: MixtureParams, est: ScoreParams, t_grid=DEFAULT_T_GRID,
                mc_samples: int = 4000, rng: np.random.Generator | None = None) -> ScoreErrorEstimate:
    if mc_samples < 1000:
        raise ValueError("mc_samples must be >= 1000")
    rng = np.random.default_rng(0) if rng is None else rng
    t_grid = np.asarray(t_grid, dtype=float)
    means, vars_ = [], []
    for t in t_grid:
        x0, _ = sample_data(truth, mc_samples, rng)
        xt, _ = forward_noise(x0, t, rng)
        g = score_gap(truth, est, t, xt)
        means.append(g.mean())
        vars_.append(g.var(ddof=1) / mc_samples)
    k = len(t_grid)
    return ScoreErrorEstimate(float(np.mean(means)), mc_samples, t_grid,
                              float(np.sqrt(np.sum(vars_)) / k))


@dataclass
class ScalingRow:
    m: int
    n: int
    d: int
    seed: int
    L_est: float
    std_error: float

    COLUMNS = ("m", "n", "d", "seed", "L_est", "std_error")


def pretrain_and_personalize(config: FedConfig, ft: FinetuneConfig, w_new: float,
                             mc_samples: int = 4000, t_grid=DEFAULT_T_GRID):
    """Collaborative pre-training, then fine-tuning of a fresh client with ``n`` samples.

    Returns the score error of the new client's personalized model.
    """
    truth = make_truth(config)
    res = run_pretraining(config, truth)
    new_truth = MixtureParams(truth.mu, w_new)
    x_new, _ = sample_data(new_truth, config.n, keyed_rng(config.seed, 8))
    logits, _ = finetune_new_client(res.backbone, x_new, replace(ft, seed=config.seed))
    est = ScoreParams(res.backbone, logits[-1])
    # canonical orientation: label flip leaves the learned score unchanged
    if flip_sign(est.mu_hat, truth.mu) < 0:
        est = ScoreParams(-est.mu_hat, -est.logit)
    return score_error(new_truth, est, t_grid, mc_samples, keyed_rng(config.seed, 9)), est


def theorem2_scaling_study(ms, ns, base: FedConfig, ft: FinetuneConfig, seeds,
                           w_new: float = 0.8, mc_samples: int = 4000, d=None) -> list:
    if len(ms) < 3 or len(ns) < 3 or len(seeds) < 5:
        raise ValueError("need at least a 3x3 (m, n) grid and 5 seeds")
    rows = []
    for m in ms:
        for n in ns:
            for s in seeds:
                cfg = replace(base, m=int(m), n=int(n), seed=int(s), weights=None,
                              d=base.d if d is None else d)
                est, _ = pretrain_and_personalize(cfg, ft, w_new, mc_samples)
                rows.append(ScalingRow(int(m), int(n), cfg.d, int(s), est.value, est.std_error))
    return rows


def median_grid(rows) -> dict:
    cells: dict = {}
    for r in rows:
        cells.setdefault((r.m, r.n), []).append(r.L_est)
    return {k: float(np.median(v)) for k, v in cells.items()}


def loglog_slopes(rows) -> dict:
    """Least-squares slopes of log median L_est against log n (per m) and log m (per n)."""
    med = median_grid(rows)
    ms = sorted({k[0] for k in med})
    ns = sorted({k[1] for k in med})
    slope_n = {m: float(np.polyfit(np.log(ns), np.log([med[(m, n)] for n in ns]), 1)[0]) for m in ms}
    slope_m = {n: float(np.polyfit(np.log(ms), np.log([med[(m, n)] for m in ms]), 1)[0]) for n in ns}
    return {"slope_n": slope_n, "slope_m": slope_m, "median": {f"{k[0]},{k[1]}": v for k, v in med.items()}}
