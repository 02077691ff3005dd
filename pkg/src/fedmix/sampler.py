"""Euler-Maruyama integration of the reverse-time OU SDE."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .mixture import MixtureParams, true_score
from .score import ScoreParams, predict_score

CHUNK = 1024

ScoreFn = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 500
    t_start: float = 5.0
    t_end: float = 1e-3

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.t_start > self.t_end > 0:
            raise ValueError("need t_start > t_end > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def mixture_score(params: MixtureParams) -> ScoreFn:
    return lambda t, x: true_score(params, t, x)


def model_score(p: ScoreParams) -> ScoreFn:
    return lambda t, x: predict_score(p, t, x)


def _integrate(score: ScoreFn, cfg: SamplerConfig, x: np.ndarray, rng: np.random.Generator):
    h = (cfg.t_start - cfg.t_end) / cfg.n_steps
    sq = np.sqrt(2.0 * h)
    for k in range(cfg.n_steps):
        # forward time of the current state; the last step reads the score at t_end + h
        t = cfg.t_start - k * h
        x = x + h * (x + 2.0 * score(t, x)) + sq * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at reverse step {k}")
    return x


def reverse_sample(score: ScoreFn, cfg: SamplerConfig, n: int, d: int, seed: int = 0) -> np.ndarray:
    """``n`` samples at time ``t_end``, started from N(0, I) at ``t_start``.

    Trajectories are generated in fixed-size chunks, each with its own keyed
    stream, so every full chunk of rows is the same whatever ``n`` is.
    """
    out = np.empty((n, d))
    for c, lo in enumerate(range(0, n, CHUNK)):
        hi = min(n, lo + CHUNK)
        rng = np.random.default_rng([seed, 7, c])
        x = rng.standard_normal((hi - lo, d))
        out[lo:hi] = _integrate(score, cfg, x, rng)
    return out


def cluster_fraction(samples, mu) -> float:
    """Fraction of rows on the ``+mu`` side of the separating hyperplane."""
    mu = np.asarray(mu, dtype=float)
    if not np.linalg.norm(mu) > 0:
        raise ValueError("mu must be non-zero")
    return float(np.mean(np.atleast_2d(samples) @ mu > 0))
