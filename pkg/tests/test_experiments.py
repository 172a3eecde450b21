# File: tests/test_experiments.py
"""
Tests for the experiment runners.

Every runner is driven end to end on a tiny configuration; the checks cover
output tables, checkpoint bookkeeping and agreement with direct formulas.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from fedpower.channel import per, rate
from fedpower.config import GCN_DIMS, ExperimentConfig
from fedpower.errors import ConfigError, UnsupportedPolicyError
from fedpower.experiments import (
    build_system,
    checkpoint_path,
    evaluate_policy,
    prepare_policy,
    run_eval,
    run_fl,
    run_interference_sweep,
    run_pmax_sweep,
    run_size_sweep,
    run_train,
    train_policy,
)
from fedpower.flsim import shard_weights
from fedpower.pdtrain import default_rate_floor
from fedpower.policies.factory import build_policy, save_policy
from fedpower.policies.strategies import GCNPolicy, OrthPolicy


@pytest.fixture
def tiny(tmp_path: Path) -> ExperimentConfig:
    return ExperimentConfig(
        num_workers=3,
        num_antennas=4,
        train_channels=16,
        val_channels=8,
        test_channels=8,
        epochs=2,
        batch_size=8,
        gcn_dims=(4, 2),
        mlp_hidden=(4,),
        seeds=(0,),
        run_dir=str(tmp_path / "run"),
    )


def read_rows(path: Path) -> list[dict[str, str]]:
    text = path.read_text(encoding="utf-8")
    lines = [line for line in text.splitlines() if not line.startswith("#")]
    return list(csv.DictReader(lines))


def test_build_system(tiny: ExperimentConfig) -> None:
    """Splits have the configured sizes; weights and floors follow their rules."""
    system = build_system(tiny, seed=2)
    assert system.train_csi.shape == (16, 3, 3)
    assert system.val_csi.shape == (8, 3, 3)
    assert system.test_csi.shape == (8, 3, 3)
    np.testing.assert_allclose(system.omega, shard_weights(3, 2))
    np.testing.assert_allclose(
        system.rate_floor_bps,
        default_rate_floor(system.train_csi, tiny.p_max, tiny.bandwidth_hz, 0.5),
    )
    fixed = build_system(tiny.replace(rate_floor_bps=3e5), seed=2)
    np.testing.assert_array_equal(fixed.rate_floor_bps, np.full(3, 3e5))


def test_interference_scale_multiplies_off_diagonals(tiny: ExperimentConfig) -> None:
    """Scaling interference leaves alpha alone and multiplies beta."""
    base = build_system(tiny, seed=1)
    scaled = build_system(tiny, seed=1, interference_scale=4.0)
    eye = np.eye(3, dtype=bool)
    np.testing.assert_allclose(scaled.test_csi[:, eye], base.test_csi[:, eye])
    np.testing.assert_allclose(scaled.test_csi[:, ~eye], 4.0 * base.test_csi[:, ~eye])


def test_orth_evaluation_matches_direct_formula(tiny: ExperimentConfig) -> None:
    """Orth's weighted PER equals the per-sample formula with one-shot selection."""
    config = tiny.replace(rate_floor_bps=1e5)
    system = build_system(config, seed=0)
    result = evaluate_policy(OrthPolicy(), system, config)
    total = lost = 0.0
    for H in system.test_csi:
        p = np.full(3, config.p_max)
        p = np.where(rate(p, H, config.bandwidth_hz) >= 1e5, p, 0.0)
        errors = per(p, H, config.waterfall)
        total += float(np.sum(np.where(p > 0, errors, 0.0) * system.omega))
        lost += float(np.sum(np.where(p > 0, errors, 1.0) * system.omega))
    n = len(system.test_csi)
    assert result.weighted_per == pytest.approx(total / n, rel=1e-12)
    assert result.weighted_failure == pytest.approx(lost / n, rel=1e-12)
    assert result.weighted_failure >= result.weighted_per
    assert result.policy == "orth"
    assert result.report.max_power <= config.p_max


def test_checkpoint_path_names_every_axis(tiny: ExperimentConfig) -> None:
    """Checkpoint names carry kind, L, P_max, interference factor and seed."""
    path = checkpoint_path(tiny, "gcn", 8, -20.0, 2.0, 3)
    assert path == Path(tiny.run_dir) / "checkpoints" / "gcn_L8_p-20_x2_s3.fpm"


def test_prepare_policy_requires_checkpoint(tiny: ExperimentConfig) -> None:
    """Learned policies without a checkpoint raise unless auto-training."""
    system = build_system(tiny, seed=0)
    with pytest.raises(ConfigError, match="fedpower train"):
        prepare_policy(tiny, "gcn", system)
    assert isinstance(prepare_policy(tiny, "orth", system), OrthPolicy)

    trained = prepare_policy(tiny.replace(auto_train=True), "gcn", system)
    path = checkpoint_path(tiny, "gcn", 3, tiny.p_max_dbw, 1.0, 0)
    assert path.exists()
    assert (Path(tiny.run_dir) / "logs" / (path.stem + ".csv")).exists()
    loaded = prepare_policy(tiny, "gcn", system)
    np.testing.assert_array_equal(
        trained.allocate_batch(system.test_csi, tiny.p_max),
        loaded.allocate_batch(system.test_csi, tiny.p_max),
    )


def test_explicit_checkpoint_overrides_lookup(tiny: ExperimentConfig, tmp_path: Path) -> None:
    """config.checkpoint serves config.policy directly."""
    policy = build_policy("gcn", 3, seed=11, gcn_dims=(4, 2))
    path = tmp_path / "mine.fpm"
    save_policy(policy, path)
    config = tiny.replace(checkpoint=str(path))
    loaded = prepare_policy(config, "gcn", build_system(config, seed=0))
    assert isinstance(loaded, GCNPolicy)
    np.testing.assert_array_equal(loaded.weights[0], policy.weights[0])


def test_train_then_eval(tiny: ExperimentConfig) -> None:
    """run_train writes checkpoints that run_eval picks up."""
    table = run_train(tiny)
    rows = read_rows(table)
    assert [r["policy"] for r in rows] == ["gcn"]
    assert 1 <= int(rows[0]["best_epoch"]) <= tiny.epochs
    assert table.read_text(encoding="utf-8").startswith("# experiment: train")
    assert "# master_seed: 0\n" in table.read_text(encoding="utf-8")

    per_table, constraints = run_eval(tiny)
    per_rows = read_rows(per_table)
    assert len(per_rows) == 1
    assert 0.0 <= float(per_rows[0]["weighted_per"]) <= 1.0
    assert float(per_rows[0]["weighted_per"]) <= float(per_rows[0]["weighted_failure"]) <= 1.0
    worker_rows = read_rows(constraints)
    assert [int(r["worker"]) for r in worker_rows] == [0, 1, 2]
    assert all(r["violated"] in ("0", "1") for r in worker_rows)


def test_mlp_trains_at_default_gains(tiny: ExperimentConfig) -> None:
    """The MLP trains on default-gain channels and keeps powers inside the budget."""
    config = tiny.replace(num_antennas=10, mlp_hidden=(16, 8), epochs=3)
    system = build_system(config, seed=0)
    result = train_policy(config, system, "mlp")
    assert len(result.log.records) == 3
    assert all(np.isfinite(r.val_weighted_per) for r in result.log.records)
    powers = result.policy.allocate_batch(system.test_csi, config.p_max)
    assert np.all(np.isfinite(powers))
    assert np.all((powers >= 0.0) & (powers <= config.p_max))


def test_default_optimizer_moves_gcn_at_default_gains(tiny: ExperimentConfig) -> None:
    """Adam moves the default GCN off its initial weights; plain ascent barely does."""
    config = tiny.replace(num_antennas=10, gcn_dims=GCN_DIMS, epochs=2)
    assert config.theta_optimizer == "adam"
    system = build_system(config, seed=0)
    initial = GCNPolicy(GCN_DIMS, seed=0).weights

    def moved(optimizer: str) -> float:
        point = config.replace(theta_optimizer=optimizer)
        trained = train_policy(point, system, "gcn").policy
        return max(float(np.abs(a - b).max()) for a, b in zip(trained.weights, initial))

    adam = moved("adam")
    assert adam >= 5e-4
    assert moved("sgd") < adam / 10


def test_tables_name_every_master_seed(tiny: ExperimentConfig) -> None:
    """Sweep tables carry the seeds in a master_seed header line."""
    config = tiny.replace(seeds=(0, 1), policies=("orth",), pmax_grid=(-20.0,))
    text = run_pmax_sweep(config).read_text(encoding="utf-8")
    headers = [line for line in text.splitlines() if line.startswith("#")]
    assert headers[-1] == "# master_seed: 0,1"
    assert len(read_rows(run_pmax_sweep(config))) == 2


def test_interference_sweep(tiny: ExperimentConfig) -> None:
    """One row per (factor, seed, policy); learned ones train per factor."""
    config = tiny.replace(
        interference_factors=(1.0, 2.0), policies=("gcn", "orth"), auto_train=True
    )
    rows = read_rows(run_interference_sweep(config))
    assert [(r["interference_factor"], r["policy"]) for r in rows] == [
        ("1.0", "gcn"),
        ("1.0", "orth"),
        ("2.0", "gcn"),
        ("2.0", "orth"),
    ]
    for factor in (1.0, 2.0):
        assert checkpoint_path(config, "gcn", 3, config.p_max_dbw, factor, 0).exists()


def test_pmax_sweep_baselines(tiny: ExperimentConfig) -> None:
    """Baselines need no checkpoints; every grid point appears."""
    config = tiny.replace(pmax_grid=(-30.0, -10.0), policies=("rand", "orth"))
    rows = read_rows(run_pmax_sweep(config))
    assert len(rows) == 4
    assert {r["p_max_dbw"] for r in rows} == {"-30.0", "-10.0"}
    assert all(0.0 <= float(r["weighted_per"]) <= 1.0 for r in rows)


def test_size_sweep(tiny: ExperimentConfig) -> None:
    """The GCN trained at the configured size serves every worker count."""
    config = tiny.replace(worker_counts=(2, 5), policies=("gcn", "orth"), auto_train=True)
    with pytest.raises(UnsupportedPolicyError):
        run_size_sweep(config, ("gcn", "mlp"))
    rows = read_rows(run_size_sweep(config))
    assert [(r["num_workers"], r["policy"]) for r in rows] == [
        ("2", "gcn"),
        ("2", "orth"),
        ("5", "gcn"),
        ("5", "orth"),
    ]
    assert checkpoint_path(config, "gcn", 3, config.p_max_dbw, 1.0, 0).exists()
    assert not checkpoint_path(config, "gcn", 5, config.p_max_dbw, 1.0, 0).exists()


def test_fl_run(tiny: ExperimentConfig) -> None:
    """Curves list every round per seed, then the mean, for each policy and ideal FL."""
    config = tiny.replace(
        policies=("orth",), fl_rounds=1, synthetic_samples=600, test_samples=50
    )
    path = run_fl(config)
    rows = read_rows(path)
    assert [(r["policy"], r["seed"], r["round"]) for r in rows] == [
        ("orth", "0", "0"),
        ("orth", "0", "1"),
        ("ideal", "0", "0"),
        ("ideal", "0", "1"),
        ("orth", "mean", "0"),
        ("orth", "mean", "1"),
        ("ideal", "mean", "0"),
        ("ideal", "mean", "1"),
    ]
    assert rows[0]["test_error"] == rows[2]["test_error"]
    assert (Path(config.run_dir) / "rounds" / "orth_s0.csv").exists()
    assert (Path(config.run_dir) / "rounds" / "ideal_s0.csv").exists()
