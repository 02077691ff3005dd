import csv
import json

import numpy as np
import pytest
import yaml

from fedmix import cli, io, score
from fedmix.config import ConfigError, ExperimentConfig, load_config

SMALL = {"m": 3, "n": 64, "d": 3, "K": 100, "tau_sync": 20, "batch": 16}


def write_cfg(tmp_path, name="cfg.yaml", **kv):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(kv))
    return str(p)


def header(path):
    with open(path, newline="") as f:
        return next(csv.reader(f))


def rows(path):
    return io.read_records(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_load_config_defaults_and_overrides(tmp_path):
    assert load_config(None) == ExperimentConfig()
    cfg = load_config(write_cfg(tmp_path, m=5, lr_grid=[0.1]), seed=9)
    assert cfg.m == 5 and cfg.seed == 9 and cfg.lr_grid == [0.1]


def test_load_config_rejects_bad_documents(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        load_config(write_cfg(tmp_path, m=5, bogus=1))
    with pytest.raises(ConfigError, match="flat"):
        load_config(write_cfg(tmp_path, m={"a": 1}))
    bad = tmp_path / "bad.yaml"
    bad.write_text("m: [1,\n")
    with pytest.raises(ConfigError):
        load_config(str(bad))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.yaml"))
    with pytest.raises(ConfigError):
        ExperimentConfig(budget="huge")


def test_usage_errors_exit_2(tmp_path):
    assert run("pretrain", "--config", write_cfg(tmp_path, nope=1), "--out", tmp_path / "o") == 2
    assert run("pretrain", "--threads", 0, "--out", tmp_path / "o") == 2
    assert run("pretrain", "--config", write_cfg(tmp_path, K=30, tau_sync=20), "--out", tmp_path / "o") == 2
    assert run("verify", "--config", write_cfg(tmp_path, checks=["nope"]), "--out", tmp_path / "o") == 2
    assert run("finetune", "--config", write_cfg(tmp_path, backbone=str(tmp_path / "x.json")),
               "--out", tmp_path / "o") == 2


def test_gen_data_files_manifest_and_reproducibility(tmp_path):
    cfg = write_cfg(tmp_path, **SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("gen-data", "--config", cfg, "--seed", 4, "--out", a) == 0
    assert run("gen-data", "--config", cfg, "--seed", 4, "--out", b) == 0
    files = sorted(p.name for p in a.iterdir())
    assert files == ["client_000.csv", "client_001.csv", "client_002.csv", "run_manifest.json"]
    for f in files[:-1]:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    assert header(a / "client_000.csv") == ["x0", "x1", "x2", "label"]
    man = io.read_json(a / "run_manifest.json")
    from fedmix.federated import make_truth
    truth = make_truth(load_config(cfg, seed=4).fed_config())
    assert np.array_equal(np.array(man["weights"]), truth.weights)
    assert man["seed"] == 4 and man["command"] == "gen-data"
    x, labels = io.read_samples(a / "client_001.csv")
    assert x.shape == (64, 3) and set(labels) <= {-1, 1}


def test_pretrain_artifacts_and_row_count(tmp_path):
    out = tmp_path / "p"
    assert run("pretrain", "--config", write_cfg(tmp_path, **SMALL), "--out", out) == 0
    assert header(out / "metrics.csv") == ["round", "mean_error", "weight_mse", "train_loss", "score_error"]
    assert len(rows(out / "metrics.csv")) == SMALL["K"] // SMALL["tau_sync"] + 1
    state = io.read_json(out / "params.json")
    assert len(state["backbone"]) == 3 and len(state["clients"]) == 3
    assert {"format_version", "code_version", "seed", "config"} <= set(io.read_json(out / "run_manifest.json"))


def test_pretrain_zero_steps_has_only_initial_row(tmp_path):
    out = tmp_path / "p"
    assert run("pretrain", "--config", write_cfg(tmp_path, **{**SMALL, "K": 0}), "--out", out) == 0
    (row,) = rows(out / "metrics.csv")
    assert row["round"] == "0"


def test_pretrain_resume_matches_uninterrupted_run(tmp_path):
    full, half, resumed = tmp_path / "full", tmp_path / "half", tmp_path / "res"
    assert run("pretrain", "--config", write_cfg(tmp_path, "f.yaml", **SMALL), "--out", full) == 0
    assert run("pretrain", "--config", write_cfg(tmp_path, "h.yaml", **{**SMALL, "K": 40}), "--out", half) == 0
    assert run("pretrain", "--config", write_cfg(tmp_path, "r.yaml", **SMALL, resume=str(half / "params.json")),
               "--out", resumed) == 0
    a, b = io.read_json(full / "params.json"), io.read_json(resumed / "params.json")
    assert a["backbone"] == b["backbone"] and a["clients"] == b["clients"]
    assert (full / "metrics.csv").read_bytes() == (resumed / "metrics.csv").read_bytes()


def test_pretrain_from_generated_data(tmp_path):
    data, p1, p2 = tmp_path / "data", tmp_path / "p1", tmp_path / "p2"
    cfg = write_cfg(tmp_path, **SMALL)
    assert run("gen-data", "--config", cfg, "--out", data) == 0
    assert run("pretrain", "--config", cfg, "--out", p1) == 0
    assert run("pretrain", "--config", write_cfg(tmp_path, "d.yaml", **SMALL, data_dir=str(data)), "--out", p2) == 0
    # CSV floats are written with repr, so loaded data reproduce the in-memory run
    assert io.read_json(p1 / "params.json")["backbone"] == io.read_json(p2 / "params.json")["backbone"]


def test_finetune_and_sample_artifacts(tmp_path):
    pre, ft, smp = tmp_path / "pre", tmp_path / "ft", tmp_path / "smp"
    assert run("pretrain", "--config", write_cfg(tmp_path, **SMALL), "--out", pre) == 0
    cfg = write_cfg(tmp_path, "ft.yaml", backbone=str(pre / "params.json"), K_ft=30, n_new=50)
    assert run("finetune", "--config", cfg, "--out", ft) == 0
    assert header(ft / "trajectory.csv") == ["step", "logit", "weight", "loss"]
    assert len(rows(ft / "trajectory.csv")) == 31
    cfg = write_cfg(tmp_path, "s.yaml", params=str(ft / "params.json"), n_samples=50, n_steps=20)
    assert run("sample", "--config", cfg, "--out", smp) == 0
    assert header(smp / "samples.csv") == ["x0", "x1", "x2"]
    x, labels = io.read_samples(smp / "samples.csv")
    assert x.shape == (50, 3) and labels is None
    cfg = write_cfg(tmp_path, "s2.yaml", params=str(pre / "params.json"), client=7, n_samples=5)
    assert run("sample", "--config", cfg, "--out", smp) == 2


def test_sample_with_true_score(tmp_path):
    out = tmp_path / "s"
    cfg = write_cfg(tmp_path, d=1, w_new=0.7, n_samples=2000, n_steps=200)
    assert run("sample", "--config", cfg, "--out", out) == 0
    assert abs(io.read_json(out / "run_manifest.json")["cluster_fraction"] - 0.7) < 0.04


def test_verify_empty_suite_passes(tmp_path):
    out = tmp_path / "v"
    assert run("verify", "--config", write_cfg(tmp_path, checks=[]), "--out", out) == 0
    report = io.read_json(out / "verify_report.json")
    assert report["passed"] and report["checks"] == []


def test_verify_gradient_check_passes_and_negative_control_fails(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, checks=["gradients"], budget="quick")
    assert run("verify", "--config", cfg, "--out", tmp_path / "ok") == 0
    real = score.grad_logit
    monkeypatch.setattr(score, "grad_logit", lambda *a, **k: 2.0 * real(*a, **k))
    assert run("verify", "--config", cfg, "--out", tmp_path / "bad") == 1
    report = io.read_json(tmp_path / "bad" / "verify_report.json")
    assert not report["passed"]


def test_verify_writes_bound_report(tmp_path):
    out = tmp_path / "v"
    cfg = write_cfg(tmp_path, checks=["weight_bound"], budget="quick")
    run("verify", "--config", cfg, "--out", out)
    assert header(out / "bound_report.csv") == ["d", "n", "w", "t", "empirical_mse", "mse_se", "theorem_bound",
                                                "exact_mse", "trials", "method"]
    assert len(rows(out / "bound_report.csv")) == 6


def test_sweep_robustness_table(tmp_path):
    out = tmp_path / "sw"
    cfg = write_cfg(tmp_path, sweep="robustness", epoch_grid=[1, 2], lr_grid=[0.0, 0.05], sweep_seeds=2, n_new=40)
    assert run("sweep", "--config", cfg, "--out", out) == 0
    assert header(out / "sweep.csv") == ["epochs", "lr", "seed", "weight_error", "backbone_drift"]
    table = rows(out / "sweep.csv")
    assert len(table) == 8 and all(float(r["backbone_drift"]) == 0.0 for r in table)


def test_sweep_scaling_table(tmp_path):
    out = tmp_path / "sc"
    cfg = write_cfg(tmp_path, sweep="scaling", m_grid=[1, 2, 3], n_grid=[16, 24, 32], sweep_seeds=5, d=2, K=20,
                    tau_sync=10, batch=8, K_ft=20)
    assert run("sweep", "--config", cfg, "--out", out) == 0
    assert header(out / "scaling.csv") == ["m", "n", "d", "seed", "L_est", "std_error"]
    assert len(rows(out / "scaling.csv")) == 45
    slopes = json.loads((out / "slopes.json").read_text())
    assert set(slopes) == {"slope_n", "slope_m", "median"}


def test_default_output_directory(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run("verify", "--config", write_cfg(tmp_path, checks=[]), "--seed", 3) == 0
    (d,) = list((tmp_path / "runs").iterdir())
    assert d.name.endswith("-s3-verify")


def test_io_round_trips(tmp_path):
    x = np.random.default_rng(0).standard_normal((7, 2))
    io.write_samples(tmp_path / "a.csv", x, np.array([1, -1, 1, 1, -1, 1, 1]))
    y, labels = io.read_samples(tmp_path / "a.csv")
    assert np.array_equal(x, y) and list(labels) == [1, -1, 1, 1, -1, 1, 1]
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        io.read_samples(tmp_path / "bad.csv")
    io.write_json(tmp_path / "j.json", {"v": np.float64(1.5), "a": np.arange(3), "b": np.bool_(True)})
    assert io.read_json(tmp_path / "j.json") == {"a": [0, 1, 2], "b": True, "v": 1.5}
