"""Scenario plumbing (presets, configs, statistics, CSV) and the CLI end to end."""

import dataclasses
import json
import math

import numpy as np
import pytest

from edgemarket import nn
from edgemarket.cli import MIX_ALGOS, main
from edgemarket.rewards import MetricsWriter
from edgemarket.scenarios import (Interval, config_from_dict, config_hash,
                                  config_to_dict, load_config, metric_mean,
                                  bidder_values, paired_diff_interval, preset,
                                  run_ofr, sensitivity_sweep, t_interval,
                                  write_sensitivity_csv, write_training_csv)
from edgemarket.simulation import PHASE_TEST, PHASE_TRAIN, WorldConfig


# -- presets --------------------------------------------------------------------


def test_training_preset_is_the_abundant_regime():
    cfg = preset("train")
    assert cfg.phase == PHASE_TRAIN
    assert sum(cfg.seller_capacities) == 60.0
    assert cfg.horizon_steps == 50000
    assert cfg.algos == ("moody",) * 6


def test_deployment_preset_is_the_scarce_regime():
    cfg = preset("test")
    assert cfg.phase == PHASE_TEST
    assert sum(cfg.seller_capacities) == 10.0
    assert cfg.horizon_steps == 100000
    assert all(a == "moody" for a in cfg.algos)
    # roughly one demand unit per bidder per step against ten units of supply:
    # the deployment population must keep the market contested
    assert len(cfg.algos) >= 10


def test_unknown_preset_rejected():
    with pytest.raises(ValueError, match="unknown preset"):
        preset("staging")


# -- config (de)serialization ------------------------------------------------------


def test_config_round_trips_through_plain_dicts():
    cfg = preset("test")
    clone = config_from_dict(config_to_dict(cfg))
    assert clone == cfg


def test_config_from_dict_applies_overrides_to_preset():
    cfg = config_from_dict({"preset": "train", "horizon_steps": 123,
                            "hyper": {"shot_steps": 7}})
    assert cfg.phase == PHASE_TRAIN
    assert cfg.horizon_steps == 123
    assert cfg.hyper.shot_steps == 7
    assert cfg.seller_capacities == (30.0, 30.0)


def test_config_from_dict_restores_tuples():
    cfg = config_from_dict({"algos": ["random", "random"],
                            "seller_capacities": [4.0, 6.0],
                            "seller_extra_delay": [0, 1],
                            "fixed_prefs": [0.5, 0.5, 0.5, 0.5, 0.5, 0.5]})
    assert cfg.algos == ("random", "random")
    assert cfg.seller_capacities == (4.0, 6.0)
    assert cfg.fixed_prefs == (0.5, 0.5, 0.5, 0.5, 0.5, 0.5)


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        config_from_dict({"horizon": 100})
    with pytest.raises(ValueError, match="unknown hyper keys"):
        config_from_dict({"hyper": {"sgd_momentum": 0.9}})


def test_load_config_reads_yaml(tmp_path):
    path = tmp_path / "scenario.yaml"
    path.write_text("preset: train\nseed: 9\nhorizon_steps: 500\n")
    cfg = load_config(path)
    assert cfg.seed == 9 and cfg.horizon_steps == 500


def test_load_config_rejects_non_mapping(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("- just\n- a list\n")
    with pytest.raises(ValueError, match="mapping"):
        load_config(path)


def test_config_hash_is_stable_and_sensitive():
    cfg = preset("test")
    h = config_hash(cfg)
    assert len(h) == 12 and all(c in "0123456789abcdef" for c in h)
    assert config_hash(preset("test")) == h
    assert config_hash(dataclasses.replace(cfg, seed=1)) != h


# -- statistics ----------------------------------------------------------------------


def test_t_interval_frozen_hand_case():
    iv = t_interval([1.0, 2.0, 3.0])
    assert iv.mean == pytest.approx(2.0)
    assert iv.half == pytest.approx(2.484137711719546)  # t(.975, 2)/sqrt(3)
    assert iv.n == 3
    assert iv.lo == pytest.approx(2.0 - iv.half) and iv.hi == pytest.approx(2.0 + iv.half)


def test_t_interval_conf_level_changes_width():
    iv = t_interval([1.0, 2.0, 3.0], confidence=0.90)
    assert iv.half == pytest.approx(1.685854460848083)


def test_t_interval_edge_sizes():
    assert math.isnan(t_interval([]).mean)
    one = t_interval([4.2])
    assert one.mean == 4.2 and math.isinf(one.half) and one.n == 1
    skipnan = t_interval([1.0, float("nan"), 3.0])
    assert skipnan.n == 2 and skipnan.mean == pytest.approx(2.0)


def test_paired_interval_frozen_hand_case():
    iv = paired_diff_interval([2.0, 4.0], [1.0, 1.0])
    assert iv.mean == pytest.approx(2.0)
    assert iv.half == pytest.approx(12.706204736432095)  # t(.975, 1) * sem 1
    with pytest.raises(ValueError, match="equal-length"):
        paired_diff_interval([1.0], [1.0, 2.0])


# -- row aggregation -------------------------------------------------------------------


class _R:
    def __init__(self):
        self.metrics = MetricsWriter()
        self.metrics.add(2000, 1, "0", "moody", "ofr", 0.25)
        self.metrics.add(2000, 1, "1", "ac", "ofr", 0.5)
        self.metrics.add(4000, 2, "0", "moody", "ofr", 0.15)
        self.metrics.add(4000, 2, "SYSTEM", "system", "fairness", 0.9)
        self.report = {"per_bidder": [
            {"agent": 0, "algo": "moody", "final_losses": 1, "successes": 3},
            {"agent": 1, "algo": "ac", "final_losses": 2, "successes": 2},
        ]}


def test_metric_mean_filters():
    r = _R()
    assert metric_mean(r, "ofr") == pytest.approx((0.25 + 0.5 + 0.15) / 3)
    assert metric_mean(r, "ofr", algo="moody") == pytest.approx(0.2)
    assert metric_mean(r, "ofr", bidder="1") == 0.5
    assert metric_mean(r, "ofr", min_window=2) == 0.15
    assert math.isnan(metric_mean(r, "latency"))


def test_bidder_values_groups_by_bidder():
    vals = bidder_values(_R(), "ofr", "moody")
    assert vals == {"0": [0.25, 0.15]}


def test_run_ofr_uses_final_counters():
    r = _R()
    assert run_ofr(r) == pytest.approx(3 / 8)
    assert run_ofr(r, algo="moody") == pytest.approx(0.25)
    assert run_ofr(r, algo="ac") == pytest.approx(0.5)
    assert math.isnan(run_ofr(r, algo="random"))


# -- CSV writers -----------------------------------------------------------------------


def test_training_csv_golden_bytes(tmp_path):
    rows = [{"epoch": 1, "agent": 0, "shot": 3, "rl_reward": 0.5,
             "credit_loss": float("nan"), "forward_loss": 0.25,
             "inverse_loss": 1e-12}]
    path = tmp_path / "training.csv"
    write_training_csv(rows, path)
    assert path.read_text() == (
        "epoch,agent,shot,rl_reward,credit_loss,forward_loss,inverse_loss\n"
        "1,0,3,0.5,nan,0.25,1e-12\n")


def test_sensitivity_csv_header(tmp_path):
    path = tmp_path / "sens.csv"
    write_sensitivity_csv([], path)
    assert path.read_text() == ("weight,value,ofr_mean,ofr_half,fairness_mean,"
                                "fairness_half,utility_mean,utility_half,seeds\n")


def test_sweep_rejects_unknown_weight():
    with pytest.raises(ValueError, match="unknown preference weight"):
        sensitivity_sweep(WorldConfig(), "w_latency", [0.5], [0])


# -- CLI end to end ----------------------------------------------------------------


SCENARIO = """\
horizon_steps: 1200
window_steps: 600
vehicle_mean_interarrival_ms: 40.0
algos: [moody, moody, ac, random]
hyper:
  shot_steps: 25
  tau_shots: 2
"""


@pytest.fixture()
def scenario(tmp_path):
    path = tmp_path / "scenario.yaml"
    path.write_text(SCENARIO)
    return path


def test_cli_train_writes_artifacts(scenario, tmp_path):
    out = tmp_path / "out"
    rc = main(["train", "--config", str(scenario), "--seed", "3",
               "--out", str(out), "--epochs", "1"])
    assert rc == 0
    assert (out / "generic.npz").exists()
    assert (out / "metrics_seed3.csv").exists()
    assert (out / "report.json").exists()
    arch, params, meta = nn.load_checkpoint(out / "generic.npz")
    assert set(params) == set(nn.MODULE_KEYS)
    assert meta["seed"] == 3
    assert "config_hash" in meta
    rows = (out / "training_seed3.csv").read_text().splitlines()
    assert rows[0] == "epoch,agent,shot,rl_reward,credit_loss,forward_loss,inverse_loss"
    assert len(rows) > 1


def test_cli_train_same_seed_identical_model(scenario, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(scenario), "--seed", "4",
                     "--out", str(out), "--epochs", "1"]) == 0
        outs.append(out)
    _, pa, _ = nn.load_checkpoint(outs[0] / "generic.npz")
    _, pb, _ = nn.load_checkpoint(outs[1] / "generic.npz")
    for k in nn.MODULE_KEYS:
        assert np.array_equal(pa[k], pb[k])
    ma = (outs[0] / "metrics_seed4.csv").read_bytes()
    mb = (outs[1] / "metrics_seed4.csv").read_bytes()
    assert ma == mb


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    scenario = tmp / "scenario.yaml"
    scenario.write_text(SCENARIO)
    out = tmp / "train"
    assert main(["train", "--config", str(scenario), "--seed", "3",
                 "--out", str(out), "--epochs", "1"]) == 0
    return scenario, out / "generic.npz"


def test_cli_test_deploys_checkpoint(trained, tmp_path):
    scenario, ckpt = trained
    out = tmp_path / "deploy"
    rc = main(["test", "--config", str(scenario), "--seeds", "5,6",
               "--checkpoint", str(ckpt), "--out", str(out)])
    assert rc == 0
    assert (out / "metrics_seed5.csv").exists()
    assert (out / "metrics_seed6.csv").exists()
    payload = json.loads((out / "report.json").read_text())
    assert len(payload["runs"]) == 2
    assert "config_hash" in payload


def test_cli_pretrain_then_deploy_cohort(scenario, tmp_path):
    out = tmp_path / "pre"
    rc = main(["pretrain", "--config", str(scenario), "--seed", "3",
               "--algo", "ac", "--out", str(out)])
    assert rc == 0
    ck = out / "ac.npz"
    arch, cohort, meta = nn.load_population(ck)
    assert meta["algo"] == "ac"
    assert meta["steps_trained"] > 0
    assert len(cohort) == 4  # one snapshot per seat of the scenario
    deploy = tmp_path / "deploy"
    rc = main(["test", "--config", str(scenario), "--seed", "5",
               "--ac-checkpoint", str(ck), "--out", str(deploy)])
    assert rc == 0
    assert (deploy / "metrics_seed5.csv").exists()


def test_cli_deploy_with_missing_cohort_errors(scenario, tmp_path, capsys):
    rc = main(["test", "--config", str(scenario), "--seed", "5",
               "--ac-checkpoint", str(tmp_path / "missing.npz"),
               "--out", str(tmp_path / "d")])
    assert rc == 1
    assert "missing.npz" in capsys.readouterr().err


def test_cli_test_runs_are_reproducible(trained, tmp_path):
    scenario, ckpt = trained
    blobs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["test", "--config", str(scenario), "--seed", "5",
                     "--checkpoint", str(ckpt), "--out", str(out)]) == 0
        blobs.append((out / "metrics_seed5.csv").read_bytes())
    assert blobs[0] == blobs[1]


def test_cli_audit_log_traces_one_seed(trained, tmp_path):
    scenario, ckpt = trained
    out = tmp_path / "audited"
    audit = tmp_path / "audit.log"
    rc = main(["test", "--config", str(scenario), "--seed", "5",
               "--checkpoint", str(ckpt), "--out", str(out),
               "--audit-log", str(audit)])
    assert rc == 0
    lines = audit.read_text().splitlines()
    counters = [l for l in lines if l.startswith("# audit")]
    assert any("capacity_violations=0" in l for l in counters)
    assert any("causality_violations=0" in l for l in counters)
    header = lines[len(counters)]
    assert header == "step,seq,kind"
    assert len(lines) > len(counters) + 1


def test_cli_mix_deploys_heterogeneous_population(trained, tmp_path):
    scenario, ckpt = trained
    out = tmp_path / "mix"
    rc = main(["mix", "--config", str(scenario), "--seed", "7",
               "--checkpoint", str(ckpt), "--out", str(out),
               "--horizon", "600"])
    assert rc == 0
    payload = json.loads((out / "report.json")
                         .read_text())
    algos = [pb["algo"] for pb in payload["runs"][0]["per_bidder"]]
    assert tuple(algos) == MIX_ALGOS


def test_cli_sensitivity_writes_sweep(trained, tmp_path):
    scenario, ckpt = trained
    out = tmp_path / "sens"
    rc = main(["sensitivity", "--config", str(scenario), "--seeds", "1",
               "--checkpoint", str(ckpt), "--out", str(out),
               "--weight", "w_fairness", "--grid", "0.25", "--horizon", "600"])
    assert rc == 0
    lines = (out / "sensitivity.csv").read_text().splitlines()
    assert len(lines) == 2
    assert lines[1].startswith("w_fairness,0.25,")


def test_cli_errors_use_exit_code_one(tmp_path):
    assert main(["test", "--config", str(tmp_path / "missing.yaml")]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("horizon: 5\n")  # unknown key
    assert main(["test", "--config", str(bad)]) == 1
    noyml = tmp_path / "list.yaml"
    noyml.write_text("- a\n")
    assert main(["test", "--config", str(noyml)]) == 1


def test_cli_oracle_exit_codes(monkeypatch):
    from edgemarket import selfcheck

    monkeypatch.setattr(selfcheck, "run_all",
                        lambda seed: {"demo": (True, "ok")})
    assert main(["oracle"]) == 0
    monkeypatch.setattr(selfcheck, "run_all",
                        lambda seed: {"demo": (False, "broken")})
    assert main(["oracle"]) == 2
