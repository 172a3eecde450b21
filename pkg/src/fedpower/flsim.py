# File: src/fedpower/flsim.py
"""
Federated learning over the simulated wireless uplink.

Every round draws a fresh channel, lets the power policy allocate transmit
powers, trains each worker's copy of the global classifier locally, draws
which uploads survive from their packet error rates, and averages the
surviving models weighted by local dataset size.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .channel import (
    ChannelRealization,
    CSIMatrix,
    build_csi,
    generate_channels,
    rate_and_delay,
    sinr,
)
from .channel import per as packet_error_rate
from .checkpoint import read_checkpoint, write_checkpoint
from .config import (
    BITS_PER_PARAMETER,
    CLASSIFIER_DIMS,
    SHARD_SIZE_RANGE,
    ExperimentConfig,
)
from .dataio import LabeledDataset
from .diffcore import (
    AdamState,
    FloatArray,
    Tensor,
    adam_step,
    backward,
    matmul,
    softmax_cross_entropy,
    tanh,
)
from .errors import ConfigError, DataError, FormatError, ShapeError
from .policies.base import PowerPolicy, transmitting
from .policies.strategies import baseline_select, glorot_uniform

__all__ = [
    "Classifier",
    "FLWorker",
    "TransmissionOutcome",
    "RoundRecord",
    "FederatedRun",
    "draw_shard_sizes",
    "shard_weights",
    "partition_data",
    "local_train",
    "draw_success",
    "transmit",
    "aggregate",
    "evaluate_error",
    "round_channel",
    "run_federated",
    "write_round_log",
    "save_classifier",
    "load_classifier",
]

logger = logging.getLogger(__name__)

# Purpose tag of the per-round channel stream; the channel dataset uses none.
ROUND_CHANNEL_STREAM = 0xF1F1


@dataclass(frozen=True)
class Classifier:
    """Dense network ``dims[0] -> ... -> dims[-1]`` with tanh hidden layers."""

    dims: tuple[int, ...] = CLASSIFIER_DIMS

    @property
    def num_parameters(self) -> int:
        return sum(a * b + b for a, b in zip(self.dims[:-1], self.dims[1:]))

    @property
    def payload_bits(self) -> int:
        """Size of one uploaded model."""
        return self.num_parameters * BITS_PER_PARAMETER

    def init(self, seed: int) -> list[FloatArray]:
        return glorot_uniform(self.dims, np.random.default_rng([seed, 0xC1F]), bias=True)

    def logits(self, weights: Sequence[Tensor], inputs: FloatArray) -> Tensor:
        h = Tensor.constant(inputs)
        n_layers = len(weights) // 2
        for layer in range(n_layers):
            h = matmul(h, weights[2 * layer]) + weights[2 * layer + 1]
            if layer < n_layers - 1:
                h = tanh(h)
        return h

    def loss(
        self, weights: Sequence[Tensor], inputs: FloatArray, labels: ArrayLike
    ) -> Tensor:
        return softmax_cross_entropy(self.logits(weights, inputs), labels)

    def predict(self, weights: Sequence[FloatArray], inputs: FloatArray) -> NDArray[np.int64]:
        logits = self.logits([Tensor.constant(w) for w in weights], inputs)
        return np.argmax(logits.values, axis=1).astype(np.int64)


@dataclass
class FLWorker:
    worker_id: int
    data: LabeledDataset
    omega: float
    weights: list[FloatArray] = field(default_factory=lambda: [])

    @property
    def num_samples(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class TransmissionOutcome:
    powers: FloatArray
    sinr: FloatArray
    per: FloatArray
    success: NDArray[np.bool_]


@dataclass(frozen=True)
class RoundRecord:
    round: int
    channel_seed: int
    powers: FloatArray
    sinr: FloatArray
    per: FloatArray
    delay: FloatArray
    success: NDArray[np.bool_]
    participants: tuple[int, ...]
    test_error: float
    stalled: bool


@dataclass
class FederatedRun:
    initial_error: float
    records: list[RoundRecord] = field(default_factory=lambda: [])
    global_weights: list[FloatArray] = field(default_factory=lambda: [])

    @property
    def errors(self) -> list[float]:
        """Test error after rounds 0, 1, ..., with round 0 the initial model."""
        return [self.initial_error, *(r.test_error for r in self.records)]

    @property
    def stalls(self) -> int:
        return sum(r.stalled for r in self.records)


def draw_shard_sizes(
    L: int, seed: int, size_range: tuple[int, int] = SHARD_SIZE_RANGE
) -> NDArray[np.int64]:
    """k_i uniform on the inclusive integer range, one per worker."""
    low, high = size_range
    rng = np.random.default_rng([seed, 0x5A4D])
    return rng.integers(low, high + 1, size=L).astype(np.int64)


def shard_weights(
    L: int, seed: int, size_range: tuple[int, int] = SHARD_SIZE_RANGE
) -> FloatArray:
    """omega_i = k_i / K for the shard sizes drawn from ``seed``."""
    sizes = draw_shard_sizes(L, seed, size_range)
    return sizes / sizes.sum()


def partition_data(
    dataset: LabeledDataset,
    L: int,
    seed: int,
    size_range: tuple[int, int] = SHARD_SIZE_RANGE,
) -> list[FLWorker]:
    """Give every worker a disjoint random shard of k_i samples.

    Raises:
        DataError: If the dataset holds fewer than L times the largest shard.
    """
    if L < 1:
        raise ShapeError("need at least one worker")
    needed = L * size_range[1]
    if len(dataset) < needed:
        raise DataError(f"{L} workers need {needed} samples, dataset has {len(dataset)}")
    sizes = draw_shard_sizes(L, seed, size_range)
    order = np.random.default_rng([seed, 0x5EA7]).permutation(len(dataset))
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    total = float(sizes.sum())
    return [
        FLWorker(
            worker_id=i,
            data=dataset.take(order[bounds[i] : bounds[i + 1]]),
            omega=float(sizes[i]) / total,
        )
        for i in range(L)
    ]


def local_train(
    worker: FLWorker,
    classifier: Classifier,
    rng: np.random.Generator,
    epochs: int = 1,
    batch: int = 16,
    lr: float = 1e-3,
) -> list[FloatArray]:
    """Shuffled minibatch passes with cross-entropy and a fresh Adam state.

    Returns new weights; the worker's own copy is not modified. A zero
    learning rate or zero epochs returns the weights unchanged.
    """
    weights = [w.copy() for w in worker.weights]
    if lr == 0.0 or epochs == 0:
        return weights
    state = AdamState()
    n = worker.num_samples
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            theta = [Tensor.parameter(w) for w in weights]
            loss = classifier.loss(theta, worker.data.inputs[idx], worker.data.labels[idx])
            grads = backward(loss, theta)
            weights, state = adam_step(weights, grads, state, lr)
    return weights


def draw_success(
    per: ArrayLike, sending: ArrayLike, rng: np.random.Generator
) -> NDArray[np.bool_]:
    """S_i ~ Bernoulli(1 - per_i) for sending workers, 0 for the rest."""
    errors = np.asarray(per, dtype=np.float64)
    return (rng.random(errors.shape) >= errors) & np.asarray(sending, dtype=bool)


def transmit(
    policy: PowerPolicy,
    csi: CSIMatrix,
    p_max: float,
    m: float,
    rng: np.random.Generator,
    rate_floor_bps: ArrayLike | None = None,
    bandwidth_hz: float = 1.0,
) -> TransmissionOutcome:
    """Allocate powers and draw which uploads arrive intact.

    Model-based policies drop workers below ``rate_floor_bps`` first. Error
    detection is assumed perfect, so a corrupted packet is always discarded.
    """
    powers = policy.allocate(csi, p_max)
    if policy.selects_participants and rate_floor_bps is not None:
        powers = baseline_select(powers, csi, rate_floor_bps, bandwidth_hz)
    errors = packet_error_rate(powers, csi, m)
    success = draw_success(errors, transmitting(powers, p_max), rng)
    return TransmissionOutcome(
        powers=powers, sinr=sinr(powers, csi), per=errors, success=success
    )


def aggregate(
    workers: Sequence[FLWorker], success: ArrayLike
) -> list[FloatArray] | None:
    """Size-weighted average of the models that arrived; None if none did."""
    mask = np.asarray(success, dtype=bool)
    arrived = [w for w, ok in zip(workers, mask) if ok]
    if not arrived:
        return None
    sizes = np.array([w.num_samples for w in arrived], dtype=np.float64)
    coeffs = sizes / sizes.sum()
    return [
        np.tensordot(coeffs, np.stack([w.weights[j] for w in arrived]), axes=1)
        for j in range(len(arrived[0].weights))
    ]


def evaluate_error(
    classifier: Classifier, weights: Sequence[FloatArray], dataset: LabeledDataset
) -> float:
    """Fraction of misclassified samples."""
    predicted = classifier.predict(weights, dataset.inputs)
    return float(np.mean(predicted != dataset.labels))


def round_channel(
    config: ExperimentConfig, num_workers: int, seed: int, round_index: int
) -> ChannelRealization:
    """Channel of FL round ``round_index`` (>= 1), disjoint from the dataset splits."""
    if round_index < 1:
        raise ConfigError(f"rounds are numbered from 1, got {round_index}")
    return generate_channels(
        1,
        num_workers,
        config.num_antennas,
        seed,
        config.pathloss_spread_db,
        config.mean_gain_db,
        offset=round_index,
        stream=ROUND_CHANNEL_STREAM,
    )[0]


def run_federated(
    policy: PowerPolicy,
    workers: Sequence[FLWorker],
    test_set: LabeledDataset,
    config: ExperimentConfig,
    seed: int,
    ideal: bool = False,
    rate_floor_bps: ArrayLike | None = None,
    classifier: Classifier | None = None,
    checkpoint_dir: Path | str | None = None,
) -> FederatedRun:
    """Simulate ``config.fl_rounds`` rounds of lossy federated averaging.

    Round t draws its channel from :func:`round_channel`. In
    ``ideal`` mode every upload succeeds regardless of the channel.
    """
    classifier = classifier or Classifier()
    L = len(workers)
    p_max = config.p_max
    global_weights = classifier.init(seed)
    for w in workers:
        w.weights = [a.copy() for a in global_weights]
    run = FederatedRun(initial_error=evaluate_error(classifier, global_weights, test_set))
    logger.info("round 0: test error %.4f", run.initial_error)

    for t in range(1, config.fl_rounds + 1):
        csi = build_csi(round_channel(config, L, seed, t))
        outcome = transmit(
            policy,
            csi,
            p_max,
            config.waterfall,
            np.random.default_rng([seed, t, 1, 0]),
            rate_floor_bps,
            config.bandwidth_hz,
        )
        for w in workers:
            w.weights = local_train(
                w,
                classifier,
                np.random.default_rng([seed, t, 0, w.worker_id]),
                config.local_epochs,
                config.local_batch,
                config.local_lr,
            )
        success = np.ones(L, dtype=bool) if ideal else outcome.success
        merged = aggregate(workers, success)
        stalled = merged is None
        if merged is None:
            logger.warning("round %d: every upload failed; keeping the global model", t)
        else:
            global_weights = merged
        for w in workers:
            w.weights = [a.copy() for a in global_weights]

        _, delay = rate_and_delay(outcome.powers, csi, config.bandwidth_hz, classifier.payload_bits)
        error = evaluate_error(classifier, global_weights, test_set)
        run.records.append(
            RoundRecord(
                round=t,
                channel_seed=seed,
                powers=outcome.powers,
                sinr=outcome.sinr,
                per=outcome.per,
                delay=delay,
                success=success,
                participants=tuple(int(i) for i in np.flatnonzero(success)),
                test_error=error,
                stalled=stalled,
            )
        )
        logger.info(
            "round %d: %d/%d uploads arrived, test error %.4f",
            t,
            int(success.sum()),
            L,
            error,
        )
        if checkpoint_dir is not None and t % config.checkpoint_every == 0:
            save_classifier(Path(checkpoint_dir) / f"global_round{t:04d}.fpm", classifier, global_weights)

    run.global_weights = global_weights
    return run


def write_round_log(
    path: Path | str, run: FederatedRun, header_lines: Sequence[str] = ()
) -> None:
    """One row per round with per-worker power, SINR, PER and success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    L = run.records[0].powers.size if run.records else 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        for line in header_lines:
            f.write(line + "\n")
        f.write(f"# initial_test_error: {run.initial_error!r}\n")
        writer = csv.writer(f)
        columns = ["round", "channel_seed"]
        for name in ("p", "sinr", "per", "delay", "s"):
            columns += [f"{name}_{i}" for i in range(L)]
        writer.writerow(columns + ["stalled", "test_error"])
        for rec in run.records:
            row: list[object] = [rec.round, rec.channel_seed]
            for values in (rec.powers, rec.sinr, rec.per, rec.delay):
                row += [repr(float(v)) for v in values]
            row += [int(s) for s in rec.success]
            writer.writerow(row + [int(rec.stalled), repr(rec.test_error)])


def save_classifier(
    path: Path | str, classifier: Classifier, weights: Sequence[FloatArray]
) -> None:
    write_checkpoint(path, "clf", classifier.dims, weights)


def load_classifier(path: Path | str) -> tuple[Classifier, list[FloatArray]]:
    ckpt = read_checkpoint(path)
    if ckpt.kind != "clf":
        raise FormatError(f"checkpoint {path} holds kind {ckpt.kind!r}, not a classifier")
    return Classifier(ckpt.dims), ckpt.arrays(bias=True)
