# File: tests/test_acceptance.py
"""
Comparative end-to-end checks.

These train policies at desk scale and compare them against the baselines,
so they take a long time; they are marked ``slow`` and deselected by default
(run them with ``pytest -m slow``). Policies are compared on the weighted
lost-upload rate, which charges every silent worker a failed upload. Trained
checkpoints are shared across the module through one run directory.
"""

from __future__ import annotations

import csv
import os
from collections.abc import Callable
from pathlib import Path

import pytest

from fedpower.config import DESK_SCALE, ExperimentConfig
from fedpower.experiments import (
    WirelessSystem,
    build_system,
    evaluate_policy,
    prepare_policy,
    run_fl,
)

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
REQUIRED_WINS = 4

Score = Callable[[str, WirelessSystem], float]


@pytest.fixture(scope="module")
def desk(tmp_path_factory: pytest.TempPathFactory) -> ExperimentConfig:
    run_dir = tmp_path_factory.mktemp("acceptance")
    return ExperimentConfig.from_mapping(
        {
            **DESK_SCALE,
            "num_workers": 8,
            "test_channels": 200,
            "auto_train": True,
            "run_dir": str(run_dir),
        }
    )


@pytest.fixture(scope="module")
def score(desk: ExperimentConfig) -> Score:
    """Weighted lost-upload rate of a policy kind on a system's test split.

    Learned kinds are trained at L=8 on the first use of each
    (seed, interference factor) and loaded from their checkpoint after that.
    """

    def evaluate(kind: str, system: WirelessSystem) -> float:
        policy = prepare_policy(desk, kind, system, trained_at=desk.num_workers)
        return evaluate_policy(policy, system, desk).weighted_failure

    return evaluate


@pytest.mark.parametrize("factor", [1.0, 2.0, 4.0, 8.0])
def test_ordering_across_interference(
    desk: ExperimentConfig, score: Score, factor: float
) -> None:
    """GCN <= MLP <= min(Rand, Orth) holds in at least 4 of 5 seeds."""
    wins = 0
    for seed in SEEDS:
        system = build_system(desk, seed, interference_scale=factor)
        gcn, mlp = score("gcn", system), score("mlp", system)
        baseline = min(score("rand", system), score("orth", system))
        wins += gcn <= mlp <= baseline
    assert wins >= REQUIRED_WINS


@pytest.mark.parametrize("L", [6, 8, 16, 24, 32])
def test_gcn_transfers_across_sizes(
    desk: ExperimentConfig, score: Score, L: int
) -> None:
    """The L=8 GCN beats Rand and Orth at every size in at least 4 of 5 seeds."""
    wins = 0
    for seed in SEEDS:
        system = build_system(desk, seed, num_workers=L)
        gcn = score("gcn", system)
        wins += gcn < score("rand", system) and gcn < score("orth", system)
    assert wins >= REQUIRED_WINS


def test_gcn_meets_rate_floors(desk: ExperimentConfig) -> None:
    """Every worker meets its rate floor within 5% and powers stay in [0, P_max]."""
    for seed in SEEDS:
        system = build_system(desk, seed)
        gcn = prepare_policy(desk, "gcn", system)
        powers = gcn.allocate_batch(system.test_csi, system.p_max)
        assert powers.min() >= 0.0
        assert powers.max() <= system.p_max
        report = evaluate_policy(gcn, system, desk).report
        assert int(report.violations(margin=0.05).sum()) == 0


def final_errors(path: Path, round_index: int) -> dict[str, float]:
    text = path.read_text(encoding="utf-8")
    lines = [line for line in text.splitlines() if not line.startswith("#")]
    return {
        row["policy"]: float(row["test_error"])
        for row in csv.DictReader(lines)
        if row["seed"] == "mean" and int(row["round"]) == round_index
    }


@pytest.fixture(scope="module")
def fl_finals(desk: ExperimentConfig) -> dict[str, float]:
    config = desk.replace(
        policies=("gcn", "rand", "orth"),
        seeds=SEEDS,
        fl_rounds=50,
        mnist_dir=os.environ.get("FEDPOWER_MNIST_DIR"),
    )
    return final_errors(run_fl(config), config.fl_rounds)


def test_federated_learning_ordering(fl_finals: dict[str, float]) -> None:
    """Ideal FL ends lowest and the GCN ends no worse than Rand or Orth."""
    assert fl_finals["ideal"] == min(fl_finals.values())
    assert fl_finals["gcn"] <= fl_finals["rand"]
    assert fl_finals["gcn"] <= fl_finals["orth"]


@pytest.mark.skipif(
    "FEDPOWER_MNIST_DIR" not in os.environ, reason="MNIST files are not available"
)
def test_ideal_federated_learning_on_mnist(fl_finals: dict[str, float]) -> None:
    """Lossless uploads reach under 15% test error on MNIST."""
    assert fl_finals["ideal"] < 0.15
