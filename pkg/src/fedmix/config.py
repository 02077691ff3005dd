"""Flat key/value experiment configuration (YAML) with strict key checking.

Every key is optional; unknown keys are an error.  The same document can
drive every subcommand, each of which reads only the keys it needs.

Keys
----
Population / pre-training:
    m, n, d, mu_norm, weights (list) or w_lo/w_hi, K, tau_sync, eta_mu,
    eta_logit, batch, t_min, t_max, optimizer (sgd|adam), lr_decay, init_var,
    data_dir (load datasets written by gen-data), resume (params.json to continue)
Fine-tuning:
    backbone (params.json from pretrain), new_data (CSV), w_new, n_new, K_ft,
    eta_ft, ft_batch, ft_optimizer, ft_lr_decay
Sampling:
    params (params.json from pretrain or finetune; omit to use the true score),
    client, n_samples, n_steps, t_start, t_end
Verification:
    checks (list of names), budget (full|quick)
Sweeps:
    sweep (robustness|scaling), epoch_grid, lr_grid, sweep_seeds, m_grid, n_grid
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import yaml

from .federated import FedConfig
from .personalize import FinetuneConfig
from .sampler import SamplerConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    # population and pre-training
    m: int = 20
    n: int = 200
    d: int = 8
    mu_norm: float = 4.0
    weights: Optional[list] = None
    w_lo: float = 0.2
    w_hi: float = 0.8
    K: int = 4000
    tau_sync: int = 50
    eta_mu: float = 1e-2
    eta_logit: float = 1e-2
    batch: int = 32
    t_min: float = 1e-2
    t_max: float = 5.0
    optimizer: str = "sgd"
    lr_decay: float = 0.0
    init_var: float = 0.1
    data_dir: Optional[str] = None
    resume: Optional[str] = None
    # fine-tuning
    backbone: Optional[str] = None
    new_data: Optional[str] = None
    w_new: float = 0.8
    n_new: int = 100
    K_ft: int = 500
    eta_ft: float = 1e-2
    ft_batch: int = 32
    ft_optimizer: str = "adam"
    ft_lr_decay: float = 0.0
    # sampling
    params: Optional[str] = None
    client: int = 0
    n_samples: int = 10_000
    n_steps: int = 500
    t_start: float = 5.0
    t_end: float = 1e-3
    # verification and sweeps
    checks: Optional[list] = None
    budget: str = "full"
    sweep: str = "robustness"
    epoch_grid: list = (1, 2, 5, 10, 20, 50, 100)
    lr_grid: list = (0.0, 1e-3, 1e-2, 1e-1)
    sweep_seeds: int = 10
    m_grid: list = (2, 8, 32)
    n_grid: list = (50, 200, 800)

    def __post_init__(self):
        for name in ("epoch_grid", "lr_grid", "m_grid", "n_grid"):
            setattr(self, name, list(getattr(self, name)))
        if self.budget not in ("full", "quick"):
            raise ConfigError(f"budget must be 'full' or 'quick', got {self.budget!r}")
        if self.sweep not in ("robustness", "scaling"):
            raise ConfigError(f"sweep must be 'robustness' or 'scaling', got {self.sweep!r}")

    def fed_config(self, threads: int = 1) -> FedConfig:
        return FedConfig(
            m=self.m, n=self.n, d=self.d, mu_norm=self.mu_norm, K=self.K, tau_sync=self.tau_sync,
            eta_mu=self.eta_mu, eta_logit=self.eta_logit, batch=self.batch, t_min=self.t_min,
            t_max=self.t_max, seed=self.seed, weights=None if self.weights is None else tuple(self.weights),
            w_lo=self.w_lo, w_hi=self.w_hi, optimizer=self.optimizer, lr_decay=self.lr_decay,
            init_var=self.init_var, threads=threads,
        )

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(K_ft=self.K_ft, eta_ft=self.eta_ft, batch=self.ft_batch, t_min=self.t_min,
                              t_max=self.t_max, seed=self.seed, optimizer=self.ft_optimizer,
                              lr_decay=self.ft_lr_decay)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(n_steps=self.n_steps, t_start=self.t_start, t_end=self.t_end)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: Optional[str | Path], **overrides) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a flat key/value mapping")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; nested values under: {', '.join(nested)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**data)
    except TypeError as e:
        raise ConfigError(str(e)) from e
