"""Plain gradient descent and Adam over (mean vector, logit) pairs."""

from __future__ import annotations

import numpy as np

from .score import ScoreParams


class GradientDescent:
    name = "sgd"

    def __init__(self, eta_mu: float, eta_logit: float, lr_decay: float = 0.0):
        self.eta_mu = eta_mu
        self.eta_logit = eta_logit
        self.lr_decay = lr_decay
        self.step_count = 0

    def _scale(self) -> float:
        # inverse-time decay eta / (1 + k / lr_decay); 0 disables
        if self.lr_decay <= 0:
            return 1.0
        return 1.0 / (1.0 + self.step_count / self.lr_decay)

    def _direction(self, g_mu, g_b):
        return g_mu, g_b

    def step(self, p: ScoreParams, g_mu, g_b, update_mu: bool = True) -> ScoreParams:
        d_mu, d_b = self._direction(g_mu, g_b)
        s = self._scale()
        self.step_count += 1
        mu = p.mu_hat - s * self.eta_mu * d_mu if update_mu else p.mu_hat.copy()
        return ScoreParams(mu, p.logit - s * self.eta_logit * d_b)

    def state_dict(self) -> dict:
        return {"name": self.name, "step_count": self.step_count}

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step_count"])


class Adam(GradientDescent):
    name = "adam"

    def __init__(self, eta_mu: float, eta_logit: float, lr_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(eta_mu, eta_logit, lr_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m_mu = self.v_mu = None
        self.m_b = self.v_b = 0.0

    def _direction(self, g_mu, g_b):
        if self.m_mu is None:
            self.m_mu = np.zeros_like(g_mu)
            self.v_mu = np.zeros_like(g_mu)
        b1, b2 = self.beta1, self.beta2
        self.m_mu = b1 * self.m_mu + (1 - b1) * g_mu
        self.v_mu = b2 * self.v_mu + (1 - b2) * g_mu**2
        self.m_b = b1 * self.m_b + (1 - b1) * g_b
        self.v_b = b2 * self.v_b + (1 - b2) * g_b**2
        k = self.step_count + 1
        c1, c2 = 1 - b1**k, 1 - b2**k
        d_mu = (self.m_mu / c1) / (np.sqrt(self.v_mu / c2) + self.eps)
        d_b = (self.m_b / c1) / (np.sqrt(self.v_b / c2) + self.eps)
        return d_mu, d_b

    def state_dict(self) -> dict:
        state = super().state_dict()
        state.update(
            m_mu=None if self.m_mu is None else self.m_mu.tolist(),
            v_mu=None if self.v_mu is None else self.v_mu.tolist(),
            m_b=self.m_b, v_b=self.v_b,
        )
        return state

    def load_state_dict(self, state: dict):
        super().load_state_dict(state)
        self.m_mu = None if state["m_mu"] is None else np.array(state["m_mu"], dtype=float)
        self.v_mu = None if state["v_mu"] is None else np.array(state["v_mu"], dtype=float)
        self.m_b, self.v_b = float(state["m_b"]), float(state["v_b"])


def make_optimizer(name: str, eta_mu: float, eta_logit: float, lr_decay: float = 0.0):
    if name == "sgd":
        return GradientDescent(eta_mu, eta_logit, lr_decay)
    if name == "adam":
        return Adam(eta_mu, eta_logit, lr_decay)
    raise ValueError(f"unknown optimizer {name!r}")
