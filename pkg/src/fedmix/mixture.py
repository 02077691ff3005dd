"""Two-component symmetric Gaussian mixture and its Ornstein-Uhlenbeck marginals.

The data model is ``q = w N(mu, I) + (1 - w) N(-mu, I)``.  Under the forward
process ``dX = -X dt + sqrt(2) dW`` the marginal at time ``t`` is the same
mixture with the mean contracted to ``mu_t = exp(-t) mu``, and the score is

    grad log q_t(x) = tanh(mu_t . x + 0.5 log(w / (1 - w))) mu_t - x
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

W_EPS = 1e-6
LOG_2PI = np.log(2.0 * np.pi)


class WeightClampWarning(UserWarning):
    """Raised when a mixing weight is pulled into [W_EPS, 1 - W_EPS]."""


@dataclass(frozen=True)
class MixtureParams:
    mu: np.ndarray
    w: float

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        if mu.ndim != 1 or mu.size < 1:
            raise ValueError("mu must be a non-empty vector")
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu must be finite")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"w must lie in [0, 1], got {self.w}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "w", float(self.w))

    @property
    def d(self) -> int:
        return self.mu.size

    def at_time(self, t: float) -> "MixtureParams":
        """The time-t marginal viewed as a mixture in its own right."""
        return MixtureParams(mean_at_time(self, t), self.w)

    def flipped(self) -> "MixtureParams":
        return MixtureParams(-self.mu, 1.0 - self.w)


@dataclass(frozen=True)
class DiffusionSchedule:
    t_min: float = 1e-2
    t_max: float = 5.0
    drift: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.t_min < self.t_max:
            raise ValueError(f"need 0 < t_min < t_max, got {self.t_min}, {self.t_max}")
        if self.drift != 1.0:
            raise ValueError("only the unit drift OU process is supported")


def alpha(t):
    """Signal contraction factor exp(-t)."""
    return np.exp(-np.asarray(t, dtype=float))


def beta(t):
    """Noise scale sqrt(1 - exp(-2t))."""
    return np.sqrt(-np.expm1(-2.0 * np.asarray(t, dtype=float)))


def clamp_weight(w: float) -> float:
    if w < W_EPS or w > 1.0 - W_EPS:
        warnings.warn(f"mixing weight {w} clamped to [{W_EPS}, {1 - W_EPS}]",
                      WeightClampWarning, stacklevel=3)
        return float(np.clip(w, W_EPS, 1.0 - W_EPS))
    return float(w)


def weight_bias(w: float) -> float:
    """Log-odds bias 0.5 log(w / (1 - w)) added to the tanh pre-activation."""
    w = clamp_weight(w)
    return 0.5 * (np.log(w) - np.log1p(-w))


def sample_data(params: MixtureParams, n: int, rng: np.random.Generator):
    """Draw ``n`` rows from the mixture.

    Returns ``(x, labels)`` where ``labels`` is +1 for the ``+mu`` component
    and -1 otherwise.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    labels = np.where(rng.random(n) < params.w, 1, -1)
    x = labels[:, None] * params.mu[None, :] + rng.standard_normal((n, params.d))
    return x, labels


def mean_at_time(params: MixtureParams, t: float) -> np.ndarray:
    if t < 0:
        raise ValueError("t must be >= 0")
    return np.exp(-t) * params.mu


def forward_noise(x0: np.ndarray, t, rng: np.random.Generator):
    """Noise ``x0`` to time ``t`` (scalar or one time per row).

    Returns ``(xt, z)``; ``z`` is the exact standard normal draw so it can
    serve as the regression target.
    """
    x0 = np.asarray(x0, dtype=float)
    t = np.asarray(t, dtype=float)
    if t.min() < 0:
        raise ValueError("t must be >= 0")
    z = rng.standard_normal(x0.shape)
    if t.ndim == 1:
        a, b = alpha(t)[:, None], beta(t)[:, None]
    else:
        a, b = alpha(t), beta(t)
    if t.ndim == 0 and t == 0:
        return x0.copy(), z
    return a * x0 + b * z, z


def log_density_at_time(params: MixtureParams, t: float, x) -> np.ndarray:
    """Log density of the time-t mixture; ``x`` is a vector or a row matrix."""
    mu_t = mean_at_time(params, t)
    x = np.asarray(x, dtype=float)
    sq_plus = np.sum((x - mu_t) ** 2, axis=-1)
    sq_minus = np.sum((x + mu_t) ** 2, axis=-1)
    with np.errstate(divide="ignore"):
        log_w, log_1mw = np.log(params.w), np.log1p(-params.w)
    # logaddexp applies the max shift, so far-away points do not underflow
    lp = np.logaddexp(log_w - 0.5 * sq_plus, log_1mw - 0.5 * sq_minus)
    return lp - 0.5 * params.d * LOG_2PI


def true_score(params: MixtureParams, t: float, x) -> np.ndarray:
    mu_t = mean_at_time(params, t)
    x = np.asarray(x, dtype=float)
    u = x @ mu_t + weight_bias(params.w)
    return np.tanh(u)[..., None] * mu_t - x
