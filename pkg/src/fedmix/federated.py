"""Deterministic simulation of collaborative pre-training.

Every client trains the full score network on its own data; after each block
of ``tau_sync`` local steps the mean vectors (the backbone) are averaged on the
server and broadcast back.  Logits stay on the clients.

All randomness is keyed: data by ``(seed, DATA, client_id)``, training draws by
``(seed, TRAIN, client_id, round)``.  Together with a fixed reduction order
this makes a run independent of how clients are scheduled.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .mixture import DiffusionSchedule, MixtureParams, sample_data
from .optim import make_optimizer
from .score import Minibatch, ScoreParams, loss_and_grads, sample_timesteps

log = logging.getLogger(__name__)

DATA, WEIGHTS, INIT, TRAIN, EVAL = 1, 2, 3, 4, 5


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


@dataclass(frozen=True)
class FedConfig:
    m: int = 20
    n: int = 200
    d: int = 8
    mu_norm: float = 4.0
    K: int = 4000
    tau_sync: int = 50
    eta_mu: float = 1e-2
    eta_logit: float = 1e-2
    batch: int = 32
    t_min: float = 1e-2
    t_max: float = 5.0
    seed: int = 0
    weights: Optional[tuple] = None
    w_lo: float = 0.2
    w_hi: float = 0.8
    optimizer: str = "sgd"
    lr_decay: float = 0.0
    init_var: float = 0.1
    threads: int = 1
    eval_t: float = 0.1

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.batch < 1 or self.batch > self.n:
            raise ValueError(f"need 1 <= batch <= n, got batch={self.batch}, n={self.n}")
        if self.tau_sync < 1 or self.K % self.tau_sync:
            raise ValueError("tau_sync must divide K")
        if self.eta_mu < 0 or self.eta_logit < 0:
            raise ValueError("learning rates must be non-negative")
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
            if len(self.weights) != self.m:
                raise ValueError("weights must list one value per client")
        DiffusionSchedule(self.t_min, self.t_max)

    @property
    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.t_min, self.t_max)

    @property
    def rounds(self) -> int:
        return self.K // self.tau_sync

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["weights"] is not None:
            out["weights"] = list(out["weights"])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FedConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown FedConfig keys: {sorted(unknown)}")
        data = dict(data)
        if data.get("weights") is not None:
            data["weights"] = tuple(data["weights"])
        return cls(**data)


@dataclass(frozen=True)
class TruthSpec:
    """Ground truth for a population: shared mean and one weight per client."""

    mu: np.ndarray
    weights: np.ndarray

    def client(self, j: int) -> MixtureParams:
        return MixtureParams(self.mu, float(self.weights[j]))


def make_truth(config: FedConfig) -> TruthSpec:
    mu = np.full(config.d, config.mu_norm / np.sqrt(config.d))
    if config.weights is not None:
        weights = np.array(config.weights, dtype=float)
    else:
        weights = keyed_rng(config.seed, WEIGHTS).uniform(config.w_lo, config.w_hi, config.m)
    return TruthSpec(mu, weights)


@dataclass
class ClientState:
    client_id: int
    data: np.ndarray
    labels: np.ndarray
    params: ScoreParams
    optimizer: object = None
    last_loss: float = float("nan")


@dataclass
class RunRecord:
    round: int
    mean_error: float
    weight_mse: float
    train_loss: float
    score_error: float = float("nan")

    COLUMNS = ("round", "mean_error", "weight_mse", "train_loss", "score_error")


class Server:
    """Holds the backbone only; logs every message it sees when asked to."""

    def __init__(self, backbone: np.ndarray, record: bool = False):
        self.backbone = np.array(backbone, dtype=float)
        self.record = record
        self.messages: list = []
        self.snapshots: list = []

    def broadcast(self) -> np.ndarray:
        return self.backbone.copy()

    def receive_all(self, replicas: dict) -> np.ndarray:
        if self.record:
            self.messages.extend((cid, r.copy()) for cid, r in sorted(replicas.items()))
        self.backbone = aggregate([replicas[cid] for cid in sorted(replicas)])
        if self.record:
            self.snapshots.append(self.snapshot())
        return self.backbone

    def snapshot(self) -> dict:
        return {"backbone": self.backbone.tolist()}


def aggregate(replicas: Sequence[np.ndarray]) -> np.ndarray:
    """Unweighted mean, reduced in the given (ascending client id) order.

    Deviations are summed relative to the first replica so identical inputs
    come back bitwise unchanged.
    """
    if len(replicas) == 0:
        raise ValueError("no replicas to aggregate")
    ref = np.asarray(replicas[0], dtype=float)
    acc = np.zeros_like(ref)
    for r in replicas:
        r = np.asarray(r, dtype=float)
        if r.shape != ref.shape:
            raise ValueError(f"replica shape {r.shape} != {ref.shape}")
        acc = acc + (r - ref)
    return ref + acc / len(replicas)


def client_data(config: FedConfig, truth: TruthSpec, j: int):
    return sample_data(truth.client(j), config.n, keyed_rng(config.seed, DATA, j))


def init_population(config: FedConfig, truth: TruthSpec,
                    client_ids: Optional[Sequence[int]] = None, datasets: Optional[dict] = None):
    """Server backbone and fresh clients.

    Each client gets ``n`` rows of its own mixture, unless ``datasets`` maps
    client ids to pre-drawn ``(x, labels)`` pairs.
    """
    if config.n < config.batch:
        raise ValueError("n must be >= batch")
    ids = range(config.m) if client_ids is None else client_ids
    backbone = keyed_rng(config.seed, INIT).normal(0.0, np.sqrt(config.init_var), config.d)
    clients = []
    for j in ids:
        if datasets is None:
            x, labels = client_data(config, truth, j)
        else:
            x, labels = (np.array(a) for a in datasets[j])
            if x.shape != (config.n, config.d):
                raise ValueError(f"client {j} data has shape {x.shape}, expected {(config.n, config.d)}")
        x.flags.writeable = False
        opt = make_optimizer(config.optimizer, config.eta_mu, config.eta_logit, config.lr_decay)
        clients.append(ClientState(j, x, labels, ScoreParams(backbone.copy(), 0.0), opt))
    return backbone, clients


def _batches(n: int, b: int, rng: np.random.Generator):
    # rows without replacement, reshuffled whenever an epoch is used up
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - b + 1, b):
            yield perm[i:i + b]


def local_step(client: ClientState, rng: np.random.Generator, schedule: DiffusionSchedule,
               batch_size: int, rows=None, update_mu: bool = True) -> ClientState:
    if rows is None:
        rows = rng.choice(client.data.shape[0], batch_size, replace=False)
    x0 = client.data[rows]
    t = sample_timesteps(schedule, x0.shape[0], rng)
    batch = Minibatch.draw(x0, t, rng)
    loss, g_mu, g_b = loss_and_grads(client.params, batch, schedule.t_min)
    client.params = client.optimizer.step(client.params, g_mu, g_b, update_mu=update_mu)
    client.last_loss = loss
    return client


def flip_sign(mu_hat: np.ndarray, mu: np.ndarray) -> int:
    """+1 or -1, whichever orientation of ``mu_hat`` is closer to ``mu``."""
    return -1 if np.linalg.norm(mu_hat + mu) < np.linalg.norm(mu_hat - mu) else 1


def flip_adjusted_error(mu_hat: np.ndarray, mu: np.ndarray) -> float:
    return float(min(np.linalg.norm(mu_hat - mu), np.linalg.norm(mu_hat + mu)))


def adjusted_weight(w_hat: float, sign: int) -> float:
    return w_hat if sign > 0 else 1.0 - w_hat


class Federation:
    """Engine state for one pre-training run."""

    def __init__(self, config: FedConfig, truth: TruthSpec,
                 client_ids: Optional[Sequence[int]] = None, record_messages: bool = False,
                 datasets: Optional[dict] = None):
        self.config = config
        self.truth = truth
        backbone, self.clients = init_population(config, truth, client_ids, datasets)
        self.server = Server(backbone, record=record_messages)
        self.round = 0
        self.records = [self._record(float("nan"))]

    def _client_round(self, client: ClientState) -> tuple:
        cfg = self.config
        rng = keyed_rng(cfg.seed, TRAIN, client.client_id, self.round)
        batches = _batches(client.data.shape[0], cfg.batch, rng)
        losses = []
        for _ in range(cfg.tau_sync):
            local_step(client, rng, cfg.schedule, cfg.batch, rows=next(batches))
            losses.append(client.last_loss)
        return client.params.mu_hat.copy(), float(np.mean(losses))

    def run_round(self, threads: Optional[int] = None):
        threads = self.config.threads if threads is None else threads
        bb = self.server.broadcast()
        for c in self.clients:
            c.params = ScoreParams(bb.copy(), c.params.logit)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(self._client_round, self.clients))
        else:
            results = [self._client_round(c) for c in self.clients]
        replicas = {c.client_id: r[0] for c, r in zip(self.clients, results)}
        self.round += 1
        new = self.server.receive_all(replicas)
        if not np.all(np.isfinite(new)) or not all(np.isfinite(c.params.logit) for c in self.clients):
            raise FloatingPointError(f"non-finite parameters in round {self.round}")
        for c in self.clients:
            c.params = ScoreParams(new.copy(), c.params.logit)
        rec = self._record(float(np.mean([r[1] for r in results])))
        self.records.append(rec)
        return rec

    def run(self, rounds: Optional[int] = None, threads: Optional[int] = None):
        rounds = self.config.rounds - self.round if rounds is None else rounds
        for _ in range(rounds):
            rec = self.run_round(threads)
            log.debug("round %d mean_error=%.4f weight_mse=%.5f", rec.round, rec.mean_error, rec.weight_mse)
        return self.records

    def _record(self, train_loss: float) -> RunRecord:
        mu = self.truth.mu
        bb = self.server.backbone
        s = flip_sign(bb, mu)
        errs = [(adjusted_weight(c.params.weight, s) - self.truth.weights[c.client_id]) ** 2
                for c in self.clients]
        return RunRecord(self.round, flip_adjusted_error(bb, mu), float(np.mean(errs)), train_loss)

    @property
    def logits(self) -> dict:
        return {c.client_id: c.params.logit for c in self.clients}

    def checkpoint(self) -> dict:
        return {
            "format_version": 1,
            "config": self.config.to_dict(),
            "round": self.round,
            "backbone": self.server.backbone.tolist(),
            "truth": {"mu": self.truth.mu.tolist(), "weights": np.asarray(self.truth.weights).tolist()},
            "clients": [
                {"client_id": c.client_id, "logit": c.params.logit,
                 "optimizer": c.optimizer.state_dict()}
                for c in self.clients
            ],
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_checkpoint(cls, state: dict, truth: Optional[TruthSpec] = None,
                        config: Optional[FedConfig] = None, datasets: Optional[dict] = None) -> "Federation":
        """Rebuild a run; ``config`` may differ from the saved one only in ``K``."""
        base = FedConfig.from_dict(state["config"])
        config = base if config is None else config
        if truth is None:
            saved = state["truth"]
            truth = TruthSpec(np.array(saved["mu"], dtype=float), np.array(saved["weights"], dtype=float))
        ids = [c["client_id"] for c in state["clients"]]
        fed = cls(config, truth, client_ids=ids, datasets=datasets)
        fed.server.backbone = np.array(state["backbone"], dtype=float)
        fed.round = int(state["round"])
        for c, s in zip(fed.clients, state["clients"]):
            c.params = ScoreParams(fed.server.backbone.copy(), s["logit"])
            c.optimizer.load_state_dict(s["optimizer"])
        fed.records = [RunRecord(**r) for r in state["records"]]
        return fed


@dataclass
class PretrainResult:
    backbone: np.ndarray
    logits: dict
    records: list = field(default_factory=list)
    federation: Optional[Federation] = None


def run_pretraining(config: FedConfig, truth: Optional[TruthSpec] = None,
                    client_ids: Optional[Sequence[int]] = None,
                    threads: Optional[int] = None, record_messages: bool = False,
                    datasets: Optional[dict] = None) -> PretrainResult:
    truth = make_truth(config) if truth is None else truth
    fed = Federation(config, truth, client_ids, record_messages=record_messages, datasets=datasets)
    fed.run(threads=threads)
    return PretrainResult(fed.server.backbone.copy(), fed.logits, fed.records, fed)


def run_local(config: FedConfig, truth: TruthSpec, client_id: int) -> PretrainResult:
    """Single-client baseline: the same client trained with no peers."""
    return run_pretraining(config, truth, client_ids=[client_id])
