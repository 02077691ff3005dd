"""Mixing-weight estimators: moment matching, EM, and the DDPM stationary point.

With known means the first moment pins the weight, ``E[X_t] = (2w - 1) mu_t``,
which gives the moment estimator ``w_hat = (1 + mu_t . mean(X_t) / |mu_t|^2) / 2``
with exact variance ``w(1-w)/n + 1/(4 |mu_t|^2 n)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .mixture import DiffusionSchedule, MixtureParams, alpha, beta, forward_noise, log_density_at_time, sample_data, weight_bias
from .score import (LOGIT_CLAMP, Minibatch, ScoreParams, _pieces, grad_logit, logit_to_weight,
                    sample_timesteps)

EM_TOL = 1e-10
EM_MAX_ITER = 1000
DEFAULT_T = 0.1


@dataclass
class WeightEstimate:
    w_hat: float
    clipped: bool
    n_used: int
    t_used: float


@dataclass
class BoundReport:
    d: int
    n: int
    w: float
    t: float
    mu_t_sq: float
    empirical_mse: float
    mse_se: float
    theorem_bound: float
    exact_mse: float
    trials: int
    mean_w_hat: float
    se_w_hat: float
    clipped_frac: float
    method: str

    def to_dict(self) -> dict:
        return asdict(self)


def exact_mse(w: float, mu_t_sq: float, n: int) -> float:
    return w * (1 - w) / n + 1.0 / (4.0 * mu_t_sq * n)


def theorem_bound(w: float, mu_t_sq: float, n: int, d: int) -> float:
    return w * (1 - w) / n + d / (4.0 * mu_t_sq * n)


def _raw_moment(mu_t: np.ndarray, xbar) -> np.ndarray:
    sq = float(mu_t @ mu_t)
    if sq < 1e-12:
        raise ValueError("|mu_t|^2 < 1e-12: t is too large for weight estimation")
    return 0.5 * (1.0 + np.asarray(xbar) @ mu_t / sq)


def moment_estimate(mu_t, xt_samples, t_used: float = float("nan")) -> WeightEstimate:
    xt = np.atleast_2d(np.asarray(xt_samples, dtype=float))
    if xt.shape[0] < 1:
        raise ValueError("need at least one sample")
    raw = float(_raw_moment(np.asarray(mu_t, dtype=float), xt.mean(axis=0)))
    w_hat = min(max(raw, 0.0), 1.0)
    return WeightEstimate(w_hat, w_hat != raw, xt.shape[0], t_used)


def em_responsibilities(params_t: MixtureParams, x) -> np.ndarray:
    """Posterior probability of the ``+mu_t`` component, ``sigmoid(2 mu_t.x + 2 b)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = x @ params_t.mu + weight_bias(params_t.w)
    return 0.5 * (1.0 + np.tanh(u))


def em_weight_step(params_t: MixtureParams, x) -> float:
    return float(np.mean(em_responsibilities(params_t, x)))


def em_fit(mu_t, x, w0: float = 0.5, tol: float = EM_TOL, max_iter: int = EM_MAX_ITER):
    """Iterate the M-step to a fixed point.

    Returns ``(w, loglik_trace)``; the trace holds the sample log-likelihood
    before each update and at the end.
    """
    mu_t = np.asarray(mu_t, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w = w0
    trace = []
    for _ in range(max_iter):
        params = MixtureParams(mu_t, w)
        trace.append(float(np.sum(log_density_at_time(params, 0.0, x))))
        w_next = em_weight_step(params, x)
        done = abs(w_next - w) < tol
        w = w_next
        if done:
            break
    trace.append(float(np.sum(log_density_at_time(MixtureParams(mu_t, w), 0.0, x))))
    return w, trace


def ddpm_logit_fit(mu, x0, rng: np.random.Generator, schedule: DiffusionSchedule = DiffusionSchedule(),
                   reps: int = 32, tol: float = 1e-12, max_iter: int = 200):
    """Run gradient descent on the DDPM loss in the logit alone, mean held at ``mu``.

    The expectation over timesteps and forward noise is replaced by ``reps``
    frozen (t, z) draws per data row, so the loss is deterministic and the
    descent converges to its stationary point.  The step size is the inverse
    curvature, re-measured each iteration.  Returns ``(w_hat, se)`` where
    ``se`` is a delta-method Monte-Carlo standard error of the limit.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    rows = np.repeat(x0, reps, axis=0)
    batch = Minibatch.draw(rows, sample_timesteps(schedule, rows.shape[0], rng), rng)
    h = 1e-5

    def grad(b):
        return grad_logit(ScoreParams(mu, b), batch, schedule.t_min)

    def curvature(b):
        return (grad(b + h) - grad(b - h)) / (2 * h)

    b = 0.0
    for _ in range(max_iter):
        g = grad(b)
        if abs(g) < tol:
            break
        b = float(np.clip(b - g / max(curvature(b), 1e-8), -LOGIT_CLAMP, LOGIT_CLAMP))
    # delta method: spread of the data-averaged gradient across noise
    # replicates, divided by the slope of the mean gradient
    _, m, th, resid = _pieces(ScoreParams(mu, b), batch)
    g_rows = 2.0 * (1.0 - th**2) * np.sum(m * resid, axis=1)
    per_rep = g_rows.reshape(x0.shape[0], reps).mean(axis=0)
    se_b = per_rep.std(ddof=1) / np.sqrt(reps) / abs(curvature(b))
    w_hat = logit_to_weight(b)
    return w_hat, 2.0 * w_hat * (1.0 - w_hat) * se_b


def _trial_means_full(params: MixtureParams, t: float, n: int, trial_rngs):
    out = np.empty((len(trial_rngs), params.d))
    for i, rng in enumerate(trial_rngs):
        x0, _ = sample_data(params, n, rng)
        xt, _ = forward_noise(x0, t, rng)
        out[i] = xt.mean(axis=0)
    return out


def _trial_means_sufficient(params: MixtureParams, t: float, n: int, trials: int, rng):
    # exact law of the sample mean: label count is binomial and the averaged
    # Gaussian parts are N(0, I/n) in both the data and the forward noise
    k = rng.binomial(n, params.w, size=trials)
    g0 = rng.standard_normal((trials, params.d)) / np.sqrt(n)
    gz = rng.standard_normal((trials, params.d)) / np.sqrt(n)
    x0bar = (2.0 * k / n - 1.0)[:, None] * params.mu + g0
    return alpha(t) * x0bar + beta(t) * gz


def evaluate_theorem1_bound(params: MixtureParams, t: float, n: int, trials: int,
                            seed: int, method: str = "auto",
                            full_budget: float = 2e8) -> BoundReport:
    """Monte-Carlo MSE of the moment estimator against the bound and exact value.

    ``method="full"`` samples every dataset row and noises it; ``"sufficient"``
    draws the sample mean from its exact distribution.  ``"auto"`` picks full
    sampling when ``trials * n * d`` fits in ``full_budget``.
    """
    if trials < 100:
        raise ValueError("trials must be >= 100")
    if method == "auto":
        method = "full" if trials * n * params.d <= full_budget else "sufficient"
    mu_t = alpha(t) * params.mu
    if method == "full":
        rngs = [np.random.default_rng([seed, i]) for i in range(trials)]
        xbar = _trial_means_full(params, t, n, rngs)
    elif method == "sufficient":
        xbar = _trial_means_sufficient(params, t, n, trials, np.random.default_rng(seed))
    else:
        raise ValueError(f"unknown method {method!r}")
    raw = _raw_moment(mu_t, xbar)
    w_hat = np.clip(raw, 0.0, 1.0)
    sq = float(mu_t @ mu_t)
    err2 = (w_hat - params.w) ** 2
    return BoundReport(
        d=params.d, n=n, w=params.w, t=t, mu_t_sq=sq,
        empirical_mse=float(err2.mean()),
        mse_se=float(err2.std(ddof=1) / np.sqrt(trials)),
        theorem_bound=theorem_bound(params.w, sq, n, params.d),
        exact_mse=exact_mse(params.w, sq, n),
        trials=trials,
        mean_w_hat=float(w_hat.mean()),
        se_w_hat=float(w_hat.std(ddof=1) / np.sqrt(trials)),
        clipped_frac=float(np.mean(raw != w_hat)),
        method=method,
    )
