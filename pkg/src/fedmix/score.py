"""One-layer conditional score network and the DDPM regression loss.

The network is ``s(t, x) = tanh(m_t . x + b) m_t - x`` with ``m_t = exp(-t) mu_hat``.
``mu_hat`` plays the shared backbone and the scalar bias ``b`` is the per-client
embedding; the implied mixing weight is ``sigmoid(2 b)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mixture import DiffusionSchedule, MixtureParams, alpha, beta, forward_noise, weight_bias

LOGIT_CLAMP = 10.0


@dataclass
class ScoreParams:
    mu_hat: np.ndarray
    logit: float = 0.0

    def __post_init__(self):
        self.mu_hat = np.array(self.mu_hat, dtype=float, ndmin=1)
        self.logit = min(max(float(self.logit), -LOGIT_CLAMP), LOGIT_CLAMP)

    @property
    def weight(self) -> float:
        return logit_to_weight(self.logit)

    @classmethod
    def from_mixture(cls, params: MixtureParams) -> "ScoreParams":
        return cls(params.mu.copy(), weight_bias(params.w))

    def copy(self) -> "ScoreParams":
        return ScoreParams(self.mu_hat.copy(), self.logit)


def logit_to_weight(b: float) -> float:
    # sigmoid(2b) written via tanh for symmetry around 0
    return 0.5 * (1.0 + np.tanh(b))


def weight_to_logit(w: float) -> float:
    return float(np.clip(np.arctanh(2.0 * w - 1.0), -LOGIT_CLAMP, LOGIT_CLAMP))


@dataclass
class Minibatch:
    x0: np.ndarray
    t: np.ndarray
    z: np.ndarray
    xt: np.ndarray

    @classmethod
    def draw(cls, x0: np.ndarray, t, rng: np.random.Generator) -> "Minibatch":
        t = np.full(x0.shape[0], t, dtype=float) if np.ndim(t) == 0 else np.asarray(t, dtype=float)
        xt, z = forward_noise(x0, t, rng)
        return cls(np.asarray(x0, dtype=float), t, z, xt)


def sample_timesteps(schedule: DiffusionSchedule, b: int, rng: np.random.Generator) -> np.ndarray:
    if b < 1:
        raise ValueError("b must be >= 1")
    return rng.uniform(schedule.t_min, schedule.t_max, size=b)


def predict_score(p: ScoreParams, t, x) -> np.ndarray:
    """Evaluate the network at one time (scalar ``t``) or one time per row."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    a = alpha(t)
    m = a[..., None] * p.mu_hat if t.ndim else a * p.mu_hat
    u = np.sum(m * x, axis=-1) + p.logit
    return np.tanh(u)[..., None] * m - x


def _check_times(batch: Minibatch, t_min: float):
    if batch.t.min() < t_min:
        raise ValueError(f"timestep below t_min={t_min}: {batch.t.min()}")


def _pieces(p: ScoreParams, batch: Minibatch):
    a = alpha(batch.t)[:, None]
    m = a * p.mu_hat
    u = np.sum(m * batch.xt, axis=1) + p.logit
    th = np.tanh(u)
    resid = th[:, None] * m - batch.xt + batch.z / beta(batch.t)[:, None]
    return a, m, th, resid


def ddpm_loss(p: ScoreParams, batch: Minibatch, t_min: float = 1e-2) -> float:
    """Mean over rows of ||s(t_i, xt_i) + z_i / beta(t_i)||^2."""
    _check_times(batch, t_min)
    _, _, _, resid = _pieces(p, batch)
    return float(np.mean(np.sum(resid**2, axis=1)))


def grad_logit(p: ScoreParams, batch: Minibatch, t_min: float = 1e-2) -> float:
    _check_times(batch, t_min)
    _, m, th, resid = _pieces(p, batch)
    return float(np.mean(2.0 * (1.0 - th**2) * np.sum(m * resid, axis=1)))


def grad_mu(p: ScoreParams, batch: Minibatch, t_min: float = 1e-2) -> np.ndarray:
    """Gradient in ``mu_hat`` through both the tanh argument and the output scale."""
    _check_times(batch, t_min)
    a, m, th, resid = _pieces(p, batch)
    mr = np.sum(m * resid, axis=1)
    g = 2.0 * a * (th[:, None] * resid + ((1.0 - th**2) * mr)[:, None] * batch.xt)
    return g.mean(axis=0)


def loss_and_grads(p: ScoreParams, batch: Minibatch, t_min: float = 1e-2):
    """``(loss, grad_mu, grad_logit)`` from a single forward pass."""
    _check_times(batch, t_min)
    a, m, th, resid = _pieces(p, batch)
    k = resid.shape[0]
    mr = np.einsum("ij,ij->i", m, resid)
    dth = 1.0 - th * th
    loss = float(np.einsum("ij,ij->", resid, resid)) / k
    g_mu = (2.0 / k) * ((a[:, 0] * th) @ resid + (a[:, 0] * dth * mr) @ batch.xt)
    g_b = 2.0 * float(dth @ mr) / k
    return loss, g_mu, g_b
