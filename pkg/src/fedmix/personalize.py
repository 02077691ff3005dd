"""New-client adaptation: the backbone is frozen and only the logit is trained."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .federated import _batches
from .mixture import DiffusionSchedule
from .optim import make_optimizer
from .score import Minibatch, ScoreParams, logit_to_weight, loss_and_grads, sample_timesteps

FT = 6


@dataclass(frozen=True)
class FinetuneConfig:
    K_ft: int = 500
    eta_ft: float = 1e-2
    batch: int = 32
    t_min: float = 1e-2
    t_max: float = 5.0
    seed: int = 0
    optimizer: str = "adam"
    lr_decay: float = 0.0

    def __post_init__(self):
        # eta_ft = 0 is allowed: it is the no-adaptation row of the sweep
        if self.eta_ft < 0:
            raise ValueError("eta_ft must be >= 0")
        if self.K_ft < 0:
            raise ValueError("K_ft must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        DiffusionSchedule(self.t_min, self.t_max)

    @property
    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.t_min, self.t_max)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FinetuneConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown FinetuneConfig keys: {sorted(unknown)}")
        return cls(**data)


def finetune_new_client(backbone: np.ndarray, data: np.ndarray, cfg: FinetuneConfig):
    """Fit the logit for a client that never took part in pre-training.

    Returns ``(logits, losses)``: ``logits[0]`` is the initial 0 and
    ``logits[k]`` the value after step ``k``; ``losses[k]`` is the minibatch
    loss evaluated at step ``k + 1``.
    """
    backbone = np.asarray(backbone)
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[1] != backbone.size:
        raise ValueError(f"backbone has dimension {backbone.size}, data has {data.shape[1]}")
    before = backbone.tobytes()
    frozen = backbone.astype(float, copy=True)
    frozen.flags.writeable = False
    b = min(cfg.batch, data.shape[0])
    rng = np.random.default_rng([cfg.seed, FT])
    batches = _batches(data.shape[0], b, rng)
    opt = make_optimizer(cfg.optimizer, 0.0, cfg.eta_ft, cfg.lr_decay)
    p = ScoreParams(frozen, 0.0)
    logits, losses = [0.0], []
    for _ in range(cfg.K_ft):
        x0 = data[next(batches)]
        batch = Minibatch.draw(x0, sample_timesteps(cfg.schedule, b, rng), rng)
        loss, _, g_b = loss_and_grads(p, batch, cfg.t_min)
        p = opt.step(p, np.zeros_like(frozen), g_b, update_mu=False)
        p.mu_hat = frozen
        logits.append(p.logit)
        losses.append(loss)
    assert backbone.tobytes() == before, "backbone modified during fine-tuning"
    return np.array(logits), np.array(losses)


def steps_per_epoch(n: int, batch: int) -> int:
    return max(1, math.floor(n / min(batch, n)))


@dataclass
class SweepRow:
    epochs: int
    lr: float
    seed: int
    weight_error: float
    backbone_drift: float

    COLUMNS = ("epochs", "lr", "seed", "weight_error", "backbone_drift")


def robustness_sweep(backbone, data, w_true: float, epoch_grid, lr_grid, seeds=(0,),
                     base: FinetuneConfig = FinetuneConfig()) -> list:
    """One fine-tuning run per (epochs, lr, seed) cell on shared data."""
    if len(epoch_grid) == 0 or len(lr_grid) == 0:
        raise ValueError("grids must be non-empty")
    backbone = np.asarray(backbone, dtype=float)
    data = np.atleast_2d(np.asarray(data, dtype=float))
    spe = steps_per_epoch(data.shape[0], base.batch)
    rows = []
    for seed in seeds:
        for lr in lr_grid:
            for ep in epoch_grid:
                before = backbone.copy()
                cfg = replace(base, K_ft=int(ep) * spe, eta_ft=float(lr), seed=int(seed))
                logits, _ = finetune_new_client(backbone, data, cfg)
                drift = float(np.max(np.abs(backbone - before)))
                err = abs(logit_to_weight(logits[-1]) - w_true)
                rows.append(SweepRow(int(ep), float(lr), int(seed), float(err), drift))
    return rows


def median_table(rows) -> dict:
    """``{(epochs, lr): median weight error over seeds}``."""
    cells: dict = {}
    for r in rows:
        cells.setdefault((r.epochs, r.lr), []).append(r.weight_error)
    return {k: float(np.median(v)) for k, v in cells.items()}
