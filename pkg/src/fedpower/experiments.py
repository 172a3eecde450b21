# File: src/fedpower/experiments.py
"""
Experiment runners behind the CLI subcommands.

Each runner walks its grid (interference factor, P_max, worker count or
policy) for every master seed in a fixed order and writes one CSV whose
header comments carry the resolved configuration.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import ChannelRealization, build_csi, generate_channels, stack_csi
from .config import LEARNED_KINDS, ExperimentConfig
from .dataio import LabeledDataset, load_mnist, split_channels, subsample, synth_dataset
from .diffcore import FloatArray
from .errors import ConfigError, UnsupportedPolicyError
from .flsim import FederatedRun, partition_data, run_federated, shard_weights, write_round_log
from .pdtrain import (
    ConstraintReport,
    TrainResult,
    default_rate_floor,
    evaluate_constraints,
    train,
    weighted_sum_per,
    weighted_upload_failure,
)
from .policies.base import LearnedPolicy, PowerPolicy
from .policies.factory import build_policy, load_policy, save_policy
from .policies.strategies import OrthPolicy, baseline_select

__all__ = [
    "SIZE_SWEEP_POLICIES",
    "WirelessSystem",
    "Evaluation",
    "build_system",
    "checkpoint_path",
    "train_policy",
    "prepare_policy",
    "evaluate_policy",
    "run_train",
    "run_eval",
    "run_interference_sweep",
    "run_pmax_sweep",
    "run_size_sweep",
    "run_fl",
    "write_table",
]

logger = logging.getLogger(__name__)

# The MLP is tied to its training size, so it cannot take part in size sweeps.
SIZE_SWEEP_POLICIES: tuple[str, ...] = ("gcn", "rand", "orth")


@dataclass(frozen=True)
class WirelessSystem:
    """Channel splits and derived quantities for one (seed, L, factor, P_max)."""

    seed: int
    num_workers: int
    interference_scale: float
    p_max: float
    train_csi: FloatArray
    val_csi: FloatArray
    test_csi: FloatArray
    omega: FloatArray
    rate_floor_bps: FloatArray


@dataclass(frozen=True)
class Evaluation:
    """Test-split scores of one policy.

    ``weighted_per`` sums over transmitting workers only; ``weighted_failure``
    also charges every silent worker a lost upload and is the figure to
    compare policies that select participants against those that do not.
    """

    policy: str
    weighted_per: float
    weighted_failure: float
    report: ConstraintReport


def build_system(
    config: ExperimentConfig,
    seed: int,
    num_workers: int | None = None,
    interference_scale: float = 1.0,
    p_max: float | None = None,
) -> WirelessSystem:
    """Generate, split and scale the channel dataset of one master seed.

    The rate floor follows ``config.rate_floor_bps`` when set and the
    median-Orth-rate rule on the training split otherwise.
    """
    L = num_workers or config.num_workers
    watts = config.p_max if p_max is None else p_max
    counts = (config.train_channels, config.val_channels, config.test_channels)
    realizations = generate_channels(
        sum(counts),
        L,
        config.num_antennas,
        seed,
        config.pathloss_spread_db,
        config.mean_gain_db,
    )
    splits = split_channels(realizations, seed, counts)

    def scaled(part: Sequence[ChannelRealization]) -> FloatArray:
        return stack_csi([build_csi(r, interference_scale) for r in part])

    train_csi = scaled(splits.train)
    if config.rate_floor_bps is not None:
        floor = np.full(L, config.rate_floor_bps)
    else:
        floor = default_rate_floor(
            train_csi, watts, config.bandwidth_hz, config.rate_floor_ratio
        )
    return WirelessSystem(
        seed=seed,
        num_workers=L,
        interference_scale=interference_scale,
        p_max=watts,
        train_csi=train_csi,
        val_csi=scaled(splits.val),
        test_csi=scaled(splits.test),
        omega=shard_weights(L, seed),
        rate_floor_bps=floor,
    )


def checkpoint_path(
    config: ExperimentConfig,
    kind: str,
    num_workers: int,
    p_max_dbw: float,
    interference_scale: float,
    seed: int,
) -> Path:
    name = (
        f"{kind}_L{num_workers}_p{p_max_dbw:g}"
        f"_x{interference_scale:g}_s{seed}.fpm"
    )
    return Path(config.run_dir) / "checkpoints" / name


def train_policy(
    config: ExperimentConfig,
    system: WirelessSystem,
    kind: str,
    p_max_dbw: float | None = None,
) -> TrainResult:
    """Train a fresh learned policy on ``system`` and store its checkpoint and log."""
    if kind not in LEARNED_KINDS:
        raise ConfigError(f"policy kind {kind!r} has nothing to train")
    dbw = config.p_max_dbw if p_max_dbw is None else p_max_dbw
    policy = build_policy(
        kind,
        system.num_workers,
        seed=system.seed,
        gcn_dims=config.gcn_dims,
        mlp_hidden=config.mlp_hidden,
        log1p_csi=config.log1p_csi,
    )
    assert isinstance(policy, LearnedPolicy)
    logger.info(
        "training %s: L=%d, P_max=%g dBW, interference x%g, seed %d",
        kind,
        system.num_workers,
        dbw,
        system.interference_scale,
        system.seed,
    )
    result = train(
        policy,
        system.train_csi,
        system.val_csi,
        system.omega,
        config.replace(p_max_dbw=dbw),
        seed=system.seed,
        rate_floor_bps=system.rate_floor_bps,
    )
    path = checkpoint_path(
        config, kind, system.num_workers, dbw, system.interference_scale, system.seed
    )
    save_policy(result.policy, path)
    result.log.write_csv(
        Path(config.run_dir) / "logs" / (path.stem + ".csv"),
        config.header_lines(system.seed),
    )
    logger.info("best validation epoch for %s: %d", path.name, result.best_epoch)
    return result


def prepare_policy(
    config: ExperimentConfig,
    kind: str,
    system: WirelessSystem,
    p_max_dbw: float | None = None,
    trained_at: int | None = None,
) -> PowerPolicy:
    """Return a ready policy: baselines are built, learned ones loaded or trained.

    ``trained_at`` names the worker count whose checkpoint serves a learned
    policy (default: the system's own). An explicit ``config.checkpoint``
    overrides the lookup for ``config.policy``.

    Raises:
        ConfigError: If a learned checkpoint is missing and auto-training is off.
    """
    if kind not in LEARNED_KINDS:
        return build_policy(kind, system.num_workers, seed=system.seed)
    if config.checkpoint is not None and kind == config.policy:
        return load_policy(config.checkpoint, log1p_csi=config.log1p_csi)
    dbw = config.p_max_dbw if p_max_dbw is None else p_max_dbw
    L = trained_at or system.num_workers
    path = checkpoint_path(config, kind, L, dbw, system.interference_scale, system.seed)
    if path.exists():
        return load_policy(path, log1p_csi=config.log1p_csi)
    if not config.auto_train:
        raise ConfigError(
            f"missing checkpoint {path}; run 'fedpower train' first or pass --auto-train"
        )
    source = system
    if L != system.num_workers:
        source = build_system(config, system.seed, L, system.interference_scale, system.p_max)
    return train_policy(config, source, kind, dbw).policy


def evaluate_policy(
    policy: PowerPolicy,
    system: WirelessSystem,
    config: ExperimentConfig,
) -> Evaluation:
    """Weighted-sum PER, lost-upload rate and constraint report on the test channels."""
    powers = policy.allocate_batch(system.test_csi, system.p_max)
    if policy.selects_participants:
        powers = baseline_select(
            powers, system.test_csi, system.rate_floor_bps, config.bandwidth_hz
        )
    value = weighted_sum_per(
        powers, system.test_csi, system.omega, config.waterfall, system.p_max
    )
    failure = weighted_upload_failure(
        powers, system.test_csi, system.omega, config.waterfall, system.p_max
    )
    report = evaluate_constraints(
        powers,
        system.test_csi,
        system.rate_floor_bps,
        config.bandwidth_hz,
        system.p_max,
    )
    return Evaluation(
        policy=policy.kind, weighted_per=value, weighted_failure=failure, report=report
    )


def write_table(
    path: Path,
    header_lines: Iterable[str],
    columns: Sequence[str],
    rows: Iterable[Sequence[object]],
) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        for line in header_lines:
            f.write(line + "\n")
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    logger.info("wrote %s", path)
    return path


def _headers(config: ExperimentConfig) -> list[str]:
    return config.header_lines(config.seeds)


def run_train(config: ExperimentConfig) -> Path:
    """Train ``config.policy`` for every seed; returns the summary CSV."""
    rows: list[list[object]] = []
    for seed in config.seeds:
        system = build_system(config, seed)
        result = train_policy(config, system, config.policy)
        final = result.log.records[-1].val_weighted_per if result.log.records else float("nan")
        rows.append([config.policy, seed, result.best_epoch, final])
    return write_table(
        Path(config.run_dir) / "train.csv",
        _headers(config),
        ["policy", "seed", "best_epoch", "final_val_weighted_per"],
        rows,
    )


def run_eval(config: ExperimentConfig) -> tuple[Path, Path]:
    """Evaluate ``config.policy`` on the test split of every seed.

    Returns the PER table and the per-worker constraint report.
    """
    per_rows: list[list[object]] = []
    report_rows: list[list[object]] = []
    for seed in config.seeds:
        system = build_system(config, seed)
        result = evaluate_policy(prepare_policy(config, config.policy, system), system, config)
        per_rows.append([config.policy, seed, result.weighted_per, result.weighted_failure])
        report = result.report
        violated = report.violations()
        for i in range(system.num_workers):
            report_rows.append(
                [
                    config.policy,
                    seed,
                    i,
                    float(report.conditional_rate_bps[i]),
                    float(report.rate_floor_bps[i]),
                    float(report.transmit_fraction[i]),
                    int(violated[i]),
                ]
            )
    run_dir = Path(config.run_dir)
    table = write_table(
        run_dir / "eval.csv",
        _headers(config),
        ["policy", "seed", "weighted_per", "weighted_failure"],
        per_rows,
    )
    constraints = write_table(
        run_dir / "constraints.csv",
        _headers(config),
        [
            "policy",
            "seed",
            "worker",
            "conditional_rate_bps",
            "rate_floor_bps",
            "transmit_fraction",
            "violated",
        ],
        report_rows,
    )
    return table, constraints


def run_interference_sweep(config: ExperimentConfig) -> Path:
    """Weighted-sum PER per (interference factor, policy, seed).

    Learned policies use the checkpoint trained at the same factor.
    """
    rows: list[list[object]] = []
    for factor in config.interference_factors:
        for seed in config.seeds:
            system = build_system(config, seed, interference_scale=factor)
            for kind in config.policies:
                policy = prepare_policy(config, kind, system)
                result = evaluate_policy(policy, system, config)
                rows.append(
                    [factor, kind, seed, result.weighted_per, result.weighted_failure]
                )
                logger.info(
                    "factor %g, %s, seed %d: %.6g", factor, kind, seed, result.weighted_per
                )
    return write_table(
        Path(config.run_dir) / "interference_sweep.csv",
        _headers(config),
        ["interference_factor", "policy", "seed", "weighted_per", "weighted_failure"],
        rows,
    )


def run_pmax_sweep(config: ExperimentConfig) -> Path:
    """Weighted-sum PER per (P_max, policy, seed), one checkpoint per grid point."""
    rows: list[list[object]] = []
    for dbw in config.pmax_grid:
        point = config.replace(p_max_dbw=dbw)
        for seed in config.seeds:
            system = build_system(point, seed)
            for kind in config.policies:
                policy = prepare_policy(point, kind, system, p_max_dbw=dbw)
                result = evaluate_policy(policy, system, point)
                rows.append([dbw, kind, seed, result.weighted_per, result.weighted_failure])
    return write_table(
        Path(config.run_dir) / "pmax_sweep.csv",
        _headers(config),
        ["p_max_dbw", "policy", "seed", "weighted_per", "weighted_failure"],
        rows,
    )


def run_size_sweep(
    config: ExperimentConfig, policies: Sequence[str] | None = None
) -> Path:
    """Evaluate policies at every worker count without retraining.

    Learned policies come from the checkpoint trained at ``config.num_workers``.

    Raises:
        UnsupportedPolicyError: If the MLP policy is requested.
    """
    kinds = tuple(policies) if policies is not None else config.policies
    if "mlp" in kinds:
        raise UnsupportedPolicyError(
            "the MLP policy is tied to its training size and cannot be size-swept"
        )
    rows: list[list[object]] = []
    for L in config.worker_counts:
        for seed in config.seeds:
            system = build_system(config, seed, num_workers=L)
            for kind in kinds:
                policy = prepare_policy(config, kind, system, trained_at=config.num_workers)
                result = evaluate_policy(policy, system, config)
                rows.append([L, kind, seed, result.weighted_per, result.weighted_failure])
    return write_table(
        Path(config.run_dir) / "size_sweep.csv",
        _headers(config),
        ["num_workers", "policy", "seed", "weighted_per", "weighted_failure"],
        rows,
    )


def _fl_data(config: ExperimentConfig, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    if config.mnist_dir is not None:
        train_set = load_mnist(config.mnist_dir, "train")
        test_set = subsample(load_mnist(config.mnist_dir, "test"), config.test_samples, seed)
        return train_set, test_set
    data = synth_dataset(config.synthetic_samples + config.test_samples, seed)
    n_test = config.test_samples
    return data.take(np.arange(n_test, len(data))), data.take(np.arange(n_test))


def run_fl(config: ExperimentConfig) -> Path:
    """Error-versus-round curves for every policy plus ideal FL.

    Writes one round log per (policy, seed) and a curve table holding the
    per-seed curves followed by the mean curve of each policy.
    """
    run_dir = Path(config.run_dir)
    curves: dict[str, list[list[float]]] = {}
    rows: list[list[object]] = []
    for seed in config.seeds:
        train_set, test_set = _fl_data(config, seed)
        system = build_system(config, seed)
        for kind in (*config.policies, "ideal"):
            ideal = kind == "ideal"
            policy = OrthPolicy() if ideal else prepare_policy(config, kind, system)
            workers = partition_data(train_set, config.num_workers, seed)
            run: FederatedRun = run_federated(
                policy,
                workers,
                test_set,
                config,
                seed,
                ideal=ideal,
                rate_floor_bps=system.rate_floor_bps,
                checkpoint_dir=run_dir / "checkpoints" / f"fl_{kind}_s{seed}",
            )
            write_round_log(
                run_dir / "rounds" / f"{kind}_s{seed}.csv", run, config.header_lines(seed)
            )
            curves.setdefault(kind, []).append(run.errors)
            rows += [[kind, seed, t, e] for t, e in enumerate(run.errors)]
            logger.info("%s seed %d: final test error %.4f", kind, seed, run.errors[-1])
    for kind, runs in curves.items():
        mean = np.mean(np.array(runs), axis=0)
        rows += [[kind, "mean", t, float(e)] for t, e in enumerate(mean)]
    return write_table(
        run_dir / "fl_curves.csv",
        _headers(config),
        ["policy", "seed", "round", "test_error"],
        rows,
    )
