"""Command-line entry point: ``fedmix <subcommand> [--config PATH] [--seed S] [--out DIR] [--threads K]``.

Exit status is 0 on success, 1 when a run or a verification check fails and
2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, ExperimentConfig, load_config
from .federated import Federation, RunRecord, TruthSpec, client_data, make_truth
from .metrics import ScalingRow, loglog_slopes, theorem2_scaling_study
from .mixture import MixtureParams, sample_data
from .personalize import SweepRow, finetune_new_client, robustness_sweep
from .sampler import cluster_fraction, model_score, reverse_sample
from .score import ScoreParams, logit_to_weight

log = logging.getLogger("fedmix")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _out_dir(args, cfg: ExperimentConfig, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = Path("runs") / f"{stamp}-s{cfg.seed}-{command}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _default_mu(cfg: ExperimentConfig) -> np.ndarray:
    return np.full(cfg.d, cfg.mu_norm / np.sqrt(cfg.d))


def _load_datasets(data_dir: str):
    path = Path(data_dir)
    try:
        man = io.read_json(path / "run_manifest.json")
    except OSError as e:
        raise UsageError(f"cannot read dataset manifest in {data_dir}: {e}") from e
    truth = TruthSpec(np.array(man["mu"], dtype=float), np.array(man["weights"], dtype=float))
    datasets = {j: io.read_samples(path / f) for j, f in enumerate(man["files"])}
    return truth, datasets


def cmd_gen_data(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    fcfg = cfg.fed_config(threads)
    truth = make_truth(fcfg)
    files = []
    for j in range(fcfg.m):
        x, labels = client_data(fcfg, truth, j)
        name = f"client_{j:03d}.csv"
        io.write_samples(out / name, x, labels)
        files.append(name)
    io.write_json(out / "run_manifest.json",
                  io.manifest("gen-data", cfg.to_dict(), cfg.seed, mu=truth.mu, weights=truth.weights, files=files))
    log.info("wrote %d client datasets to %s", len(files), out)
    return EXIT_OK


def cmd_pretrain(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    fcfg = cfg.fed_config(threads)
    truth, datasets = None, None
    if cfg.data_dir:
        truth, datasets = _load_datasets(cfg.data_dir)
        x0 = datasets[0][0]
        fcfg = replace(fcfg, m=len(datasets), n=x0.shape[0], d=x0.shape[1])
    if cfg.resume:
        state = io.read_json(cfg.resume)
        saved = Federation.from_checkpoint(state, truth=truth, datasets=datasets).config
        fed = Federation.from_checkpoint(state, truth=truth, config=replace(saved, K=cfg.K, threads=threads),
                                         datasets=datasets)
    else:
        fed = Federation(fcfg, make_truth(fcfg) if truth is None else truth, datasets=datasets)
    try:
        fed.run()
    except FloatingPointError as e:
        log.error("pre-training aborted: %s", e)
        return EXIT_FAIL
    io.write_records(out / "metrics.csv", fed.records, RunRecord.COLUMNS)
    io.write_json(out / "params.json", fed.checkpoint())
    io.write_json(out / "run_manifest.json", io.manifest("pretrain", cfg.to_dict(), cfg.seed))
    last = fed.records[-1]
    log.info("round %d: mean_error=%.4f weight_mse=%.5f", last.round, last.mean_error, last.weight_mse)
    return EXIT_OK


def _read_params(path: str):
    try:
        return io.read_json(path)
    except OSError as e:
        raise UsageError(f"cannot read parameters file {path}: {e}") from e


def cmd_finetune(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    if cfg.backbone:
        state = _read_params(cfg.backbone)
        backbone = np.array(state["backbone"], dtype=float)
        mu_true = np.array(state["truth"]["mu"], dtype=float)
    else:
        backbone = mu_true = _default_mu(cfg)
    if cfg.new_data:
        x, _ = io.read_samples(cfg.new_data)
    else:
        x, _ = sample_data(MixtureParams(mu_true, cfg.w_new), cfg.n_new, np.random.default_rng([cfg.seed, 11]))
    logits, losses = finetune_new_client(backbone, x, cfg.finetune_config())
    rows = [{"step": k, "logit": float(b), "weight": logit_to_weight(b),
             "loss": float(losses[k - 1]) if k else float("nan")} for k, b in enumerate(logits)]
    io.write_records(out / "trajectory.csv", rows, ("step", "logit", "weight", "loss"))
    io.write_json(out / "params.json", {"format_version": io.FORMAT_VERSION, "backbone": backbone,
                                        "logit": float(logits[-1]), "truth": {"mu": mu_true, "w": cfg.w_new}})
    io.write_json(out / "run_manifest.json", io.manifest("finetune", cfg.to_dict(), cfg.seed))
    log.info("fine-tuned weight %.4f (target %.4f)", logit_to_weight(logits[-1]), cfg.w_new)
    return EXIT_OK


def cmd_sample(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    if cfg.params:
        state = _read_params(cfg.params)
        backbone = np.array(state["backbone"], dtype=float)
        if "logit" in state:
            logit = float(state["logit"])
        else:
            by_id = {c["client_id"]: c["logit"] for c in state["clients"]}
            if cfg.client not in by_id:
                raise UsageError(f"client {cfg.client} not in {cfg.params}")
            logit = float(by_id[cfg.client])
        p = ScoreParams(backbone, logit)
    else:
        p = ScoreParams.from_mixture(MixtureParams(_default_mu(cfg), cfg.w_new))
    x = reverse_sample(model_score(p), cfg.sampler_config(), cfg.n_samples, p.mu_hat.size, seed=cfg.seed)
    io.write_samples(out / "samples.csv", x)
    frac = cluster_fraction(x, p.mu_hat)
    io.write_json(out / "run_manifest.json",
                  io.manifest("sample", cfg.to_dict(), cfg.seed, cluster_fraction=frac, model_weight=p.weight))
    log.info("generated %d samples; cluster fraction %.4f (model weight %.4f)", len(x), frac, p.weight)
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    from . import verify

    names = cfg.checks if cfg.checks is not None else list(verify.CHECKS)
    try:
        report = verify.run_checks(names, cfg.budget, log=print)
    except KeyError as e:
        raise UsageError(str(e)) from e
    for chk in report["checks"]:
        if chk["name"] == "weight_bound":
            io.write_records(out / "bound_report.csv", chk["details"]["cells"],
                             ("d", "n", "w", "t", "empirical_mse", "mse_se", "theorem_bound", "exact_mse", "trials", "method"))
        if chk["name"] == "score_scaling":
            io.write_records(out / "scaling.csv", chk["details"]["rows"], ScalingRow.COLUMNS)
    io.write_json(out / "verify_report.json", report)
    io.write_json(out / "run_manifest.json", io.manifest("verify", cfg.to_dict(), cfg.seed))
    print("ALL CHECKS PASSED" if report["passed"] else "SOME CHECKS FAILED")
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_sweep(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    seeds = range(cfg.seed, cfg.seed + cfg.sweep_seeds)
    if cfg.sweep == "robustness":
        if cfg.backbone:
            state = _read_params(cfg.backbone)
            backbone = np.array(state["backbone"], dtype=float)
            mu_true = np.array(state["truth"]["mu"], dtype=float)
        else:
            backbone = mu_true = _default_mu(cfg)
        rows = []
        for s in seeds:
            x, _ = sample_data(MixtureParams(mu_true, cfg.w_new), cfg.n_new, np.random.default_rng([s, 12]))
            rows += robustness_sweep(backbone, x, cfg.w_new, cfg.epoch_grid, cfg.lr_grid, seeds=(s,),
                                     base=cfg.finetune_config())
        io.write_records(out / "sweep.csv", rows, SweepRow.COLUMNS)
    else:
        rows = theorem2_scaling_study(cfg.m_grid, cfg.n_grid, cfg.fed_config(threads), cfg.finetune_config(),
                                      list(seeds), w_new=cfg.w_new)
        io.write_records(out / "scaling.csv", rows, ScalingRow.COLUMNS)
        io.write_json(out / "slopes.json", loglog_slopes(rows))
    io.write_json(out / "run_manifest.json", io.manifest("sweep", cfg.to_dict(), cfg.seed))
    log.info("wrote %d sweep rows to %s", len(rows), out)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat YAML key/value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output directory (default: runs/<timestamp>-s<seed>-<command>)")
        p.add_argument("--threads", type=int, default=1, help="cap on client-level parallelism")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = _out_dir(args, cfg, args.command)
        return COMMANDS[args.command](cfg, out, args.threads)
    except (ConfigError, UsageError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    except (ValueError, TypeError) as e:
        log.error("invalid configuration: %s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
