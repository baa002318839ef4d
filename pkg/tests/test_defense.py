"""Defense sweep tests: variant construction and degenerate-DP equivalence."""

import dataclasses
import json

import numpy as np
import pytest

from fedprof import defense, harness, nn
from fedprof.errors import ConfigError

BASE = {
    "seed": 9,
    "dataset": {"n_label": 4, "dim": 8},
    "federation": {"n_user": 4, "user_size": 60, "cp_range": [0.4, 0.6],
                   "cd_range": [0.2, 0.4], "equalize_rest": False},
    "fl": {"n_rounds": 3, "learning_rate": 0.05},
    "attack": {"x": 2, "n_shadows": 8, "aux_per_class": 20, "shadow_epochs": 2,
               "meta": {"epochs": 100}},
    "eval_per_class": 10,
    "with_baseline": False,
}


def base_cfg():
    return harness.validate_config(json.dumps(BASE))


def test_sweep_labels_must_be_unique():
    tc = nn.TrainConfig(0.05, 1, 16, seed=0)
    with pytest.raises(ConfigError):
        defense.DefenseSweep((("a", tc), ("a", tc)))


def test_standard_sweep_structure():
    tc = nn.TrainConfig(0.05, 1, 16, seed=0)
    sweep = defense.standard_sweep(tc)
    labels = [label for label, _ in sweep.variants]
    assert labels == ["none", "dropout", "dp_0.05", "dp_0.25", "dp_1", "dp_4"]
    assert sweep.variants[1][1].dropout_enabled
    assert sweep.variants[2][1].dp.noise_multiplier == 0.05


def test_degenerate_dp_equals_no_defense_metrics():
    # noise multiplier 0 and a clip norm far above any gradient norm behave
    # like plain SGD on the reported metrics
    tc = nn.TrainConfig(0.05, 1, 16, seed=0)
    sweep = defense.DefenseSweep((
        ("none", tc),
        ("dp_degenerate", dataclasses.replace(
            tc, dp=nn.DpConfig(clip_norm=1e9, noise_multiplier=0.0))),
    ))
    rows = defense.run_defense_sweep(base_cfg(), sweep)
    assert rows[0].attack_acc_top1 == rows[1].attack_acc_top1
    assert rows[0].model_utility == pytest.approx(rows[1].model_utility, abs=1e-9)


def test_sweep_runs_and_writes_csv(tmp_path):
    tc = nn.TrainConfig(0.05, 1, 16, seed=0)
    sweep = defense.DefenseSweep((
        ("none", tc),
        ("dropout", dataclasses.replace(tc, dropout_enabled=True)),
        ("dp_4", dataclasses.replace(tc, dp=nn.DpConfig(10.0, 4.0))),
    ))
    rows = defense.run_defense_sweep(base_cfg(), sweep, out_dir=tmp_path)
    assert [r.label for r in rows] == ["none", "dropout", "dp_4"]
    text = (tmp_path / "sweep.csv").read_text().splitlines()
    assert text[0] == "label,noise_multiplier,attack_acc_top1,model_utility"
    assert len(text) == 4
    assert text[3].startswith("dp_4,4.0,")


def test_disabled_defense_is_bit_identical_to_plain_run():
    rep_plain = harness.run_experiment(base_cfg())
    cfg_none = harness.validate_config(json.dumps({**BASE, "defense": {"apply": "none"}}))
    rep_none = harness.run_experiment(cfg_none)
    assert rep_plain.to_json() == rep_none.to_json()
