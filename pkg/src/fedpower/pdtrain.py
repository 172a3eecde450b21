# File: src/fedpower/pdtrain.py
"""
Primal-dual constrained learning of power policies.

The policy weights Theta, the auxiliary success probabilities q and rates r,
and the multipliers lambda_q, lambda_r follow the five-step primal-dual
iteration on the Lagrangian

    g(q) + lambda_q^T (E[f_q] - q) + lambda_r^T (E[f_r] - r),

with E[f_q] the expected success probability of every worker and E[f_r] its
expected rate conditioned on transmitting. Expectations are empirical means
over channel minibatches.

Inside the loop rates are measured in units of the bandwidth B (nats/s/Hz),
which keeps the rate and probability constraints on comparable scales. Rate
floors are configured and reported in b/s.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .channel import CSIMatrix, per, rate, weighted_success
from .config import ExperimentConfig
from .diffcore import AdamState, FloatArray, Tensor, adam_step, backward
from .errors import ConfigError, DivergenceError, NumericError
from .policies.base import LearnedPolicy, PowerPolicy, as_csi_batch, transmitting
from .policies.strategies import OrthPolicy

__all__ = [
    "StepSizes",
    "PrimalDualState",
    "BatchEstimates",
    "EpochRecord",
    "TrainingLog",
    "TrainResult",
    "ConstraintReport",
    "estimate_expectations",
    "lagrangian",
    "primal_dual_step",
    "weighted_sum_per",
    "weighted_upload_failure",
    "default_rate_floor",
    "evaluate_constraints",
    "train",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepSizes:
    theta: float = 1e-3
    q: float = 1e-4
    r: float = 1e-4
    lambda_q: float = 1e-4
    lambda_r: float = 1e-4

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> StepSizes:
        return cls(
            theta=config.lr_theta,
            q=config.lr_q,
            r=config.lr_r,
            lambda_q=config.lr_lambda_q,
            lambda_r=config.lr_lambda_r,
        )


@dataclass
class PrimalDualState:
    """Primal variables, multipliers and step sizes of the iteration.

    ``r`` and ``r0`` are in units of B. ``theta`` is empty when the policy
    has no trainable weights.
    """

    theta: list[FloatArray]
    q_tilde: FloatArray
    r: FloatArray
    lambda_q: FloatArray
    lambda_r: FloatArray
    r0: FloatArray
    steps: StepSizes = field(default_factory=StepSizes)
    literal_q_update: bool = False
    theta_optimizer: str = "adam"
    adam: AdamState = field(default_factory=AdamState)
    iteration: int = 0

    @classmethod
    def initial(
        cls,
        theta: Sequence[FloatArray],
        r0: ArrayLike,
        steps: StepSizes | None = None,
        literal_q_update: bool = False,
        theta_optimizer: str = "adam",
    ) -> PrimalDualState:
        """Duals at 1, q at 0.5 and r at its floor."""
        floor = np.array(r0, dtype=np.float64)
        L = floor.shape[0]
        return cls(
            theta=[np.array(w, dtype=np.float64) for w in theta],
            q_tilde=np.full(L, 0.5),
            r=floor.copy(),
            lambda_q=np.ones(L),
            lambda_r=np.ones(L),
            r0=floor,
            steps=steps or StepSizes(),
            literal_q_update=literal_q_update,
            theta_optimizer=theta_optimizer,
        )


@dataclass(frozen=True)
class BatchEstimates:
    """Empirical constraint expectations over one channel batch.

    ``f_q`` and ``f_r`` are differentiable with respect to ``theta``. Entries
    of ``f_r`` where ``transmit_counts`` is zero are undefined and held at 0.
    """

    f_q: Tensor
    f_r: Tensor
    transmit_counts: NDArray[np.int64]
    theta: list[Tensor]

    @property
    def defined(self) -> NDArray[np.bool_]:
        return self.transmit_counts > 0

    @property
    def f_q_hat(self) -> FloatArray:
        return self.f_q.numpy()

    @property
    def f_r_hat(self) -> FloatArray:
        """Conditional mean rates, NaN where undefined."""
        return np.where(self.defined, self.f_r.values, np.nan)


def _powers(
    policy: PowerPolicy,
    H: FloatArray,
    p_max: float,
    theta: Sequence[FloatArray] | None,
) -> tuple[Tensor, list[Tensor]]:
    if isinstance(policy, LearnedPolicy):
        bound = policy.bind(theta)
        return policy.forward(H, p_max, bound), bound
    return Tensor.constant(policy.allocate_batch(H, p_max)), []


def estimate_expectations(
    policy: PowerPolicy,
    channels: Sequence[CSIMatrix] | ArrayLike,
    p_max: float,
    m: float,
    bandwidth: float = 1.0,
    theta: Sequence[FloatArray] | None = None,
) -> BatchEstimates:
    """Batch means of the success probability and the conditional rate.

    Args:
        policy: Learned or model-based policy.
        channels: CSI matrices, a list or a (b, L, L) array.
        p_max: Power budget in watts.
        m: Waterfall threshold.
        bandwidth: B; the default 1.0 measures rates in units of B.
        theta: Weights to evaluate a learned policy with (default: its own).

    The transmit indicator enters as a constant: no gradient flows through it.
    """
    if isinstance(channels, Sequence) and channels and isinstance(channels[0], CSIMatrix):
        H = np.stack([c.H for c in channels])  # type: ignore[union-attr]
    else:
        H = as_csi_batch(channels)  # type: ignore[arg-type]
    if H.shape[0] < 1:
        raise ConfigError("cannot estimate expectations on an empty batch")

    powers, bound = _powers(policy, H, p_max, theta)
    success = 1.0 - per(powers, H, m)
    f_q = success.mean(axis=0)

    mask = transmitting(powers.values, p_max).astype(np.float64)
    counts = mask.sum(axis=0).astype(np.int64)
    rates = rate(powers, H, bandwidth)
    f_r = (rates * mask).sum(axis=0) / np.maximum(counts, 1).astype(np.float64)
    return BatchEstimates(f_q=f_q, f_r=f_r, transmit_counts=counts, theta=bound)


def lagrangian(
    state: PrimalDualState, estimates: BatchEstimates, omega: ArrayLike
) -> float:
    """Lagrangian value; undefined conditional-rate terms are omitted."""
    defined = estimates.defined
    value = weighted_success(state.q_tilde, omega)
    value += float(state.lambda_q @ (estimates.f_q.values - state.q_tilde))
    slack_r = np.where(defined, estimates.f_r.values - state.r, 0.0)
    value += float(state.lambda_r @ slack_r)
    return value


def primal_dual_step(
    state: PrimalDualState, estimates: BatchEstimates, omega: ArrayLike
) -> PrimalDualState:
    """One iteration of the five primal-dual updates, in order.

    Theta ascends lambda_q^T f_q + lambda_r^T f_r; q ascends the Lagrangian
    (or only g when ``literal_q_update``) and is clipped to [0, 1]; r descends
    onto [r0, inf); both multipliers descend on their slacks and are clamped
    at 0. The lambda_r update is skipped for workers that never transmitted
    in the batch.

    Raises:
        NumericError: If the Theta gradient is not finite. The state is left
            untouched.
    """
    w = np.asarray(omega, dtype=np.float64)
    steps = state.steps
    defined = estimates.defined
    f_q = estimates.f_q.values
    f_r = estimates.f_r.values

    # (1) policy weights
    theta = state.theta
    if estimates.theta and steps.theta > 0.0:
        surrogate = (estimates.f_q * state.lambda_q).sum() + (
            estimates.f_r * np.where(defined, state.lambda_r, 0.0)
        ).sum()
        grads = backward(surrogate, estimates.theta)
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise NumericError(f"non-finite policy gradient at step {state.iteration}")
        if state.theta_optimizer == "adam":
            theta, _ = adam_step(theta, [-g for g in grads], state.adam, steps.theta)
        else:
            theta = [t + steps.theta * g for t, g in zip(theta, grads)]

    # (2) auxiliary success probabilities
    grad_q = w if state.literal_q_update else w - state.lambda_q
    q_tilde = np.clip(state.q_tilde + steps.q * grad_q, 0.0, 1.0)

    # (3) auxiliary rates
    r = np.maximum(state.r - steps.r * state.lambda_r, state.r0)

    # (4), (5) multipliers
    lambda_q = np.maximum(state.lambda_q - steps.lambda_q * (f_q - q_tilde), 0.0)
    lambda_r = np.where(
        defined,
        np.maximum(state.lambda_r - steps.lambda_r * (f_r - r), 0.0),
        state.lambda_r,
    )
    return dataclasses.replace(
        state,
        theta=theta,
        q_tilde=q_tilde,
        r=r,
        lambda_q=lambda_q,
        lambda_r=lambda_r,
        iteration=state.iteration + 1,
    )


def weighted_sum_per(
    powers: ArrayLike,
    H: CSIMatrix | ArrayLike,
    omega: ArrayLike,
    m: float,
    p_max: float,
) -> float:
    """Mean over samples of sum_i omega_i PER_i over transmitting workers."""
    p = np.atleast_2d(np.asarray(powers, dtype=np.float64))
    batch = as_csi_batch(H)
    errors = per(p, batch, m)
    mask = transmitting(p, p_max)
    w = np.asarray(omega, dtype=np.float64)
    return float(np.mean(np.sum(np.where(mask, errors, 0.0) * w, axis=-1)))


def weighted_upload_failure(
    powers: ArrayLike,
    H: CSIMatrix | ArrayLike,
    omega: ArrayLike,
    m: float,
    p_max: float,
) -> float:
    """Mean over samples of sum_i omega_i P(upload i is lost).

    Unlike :func:`weighted_sum_per`, a silent worker counts as a lost upload,
    so policies that drop workers are not rewarded for it.
    """
    p = np.atleast_2d(np.asarray(powers, dtype=np.float64))
    batch = as_csi_batch(H)
    errors = per(p, batch, m)
    mask = transmitting(p, p_max)
    w = np.asarray(omega, dtype=np.float64)
    return float(np.mean(np.sum(np.where(mask, errors, 1.0) * w, axis=-1)))


def default_rate_floor(
    H: CSIMatrix | ArrayLike, p_max: float, bandwidth_hz: float, ratio: float
) -> FloatArray:
    """r_0,i = ratio * median rate of worker i when everyone transmits at P_max."""
    batch = as_csi_batch(H)
    powers = OrthPolicy().allocate_batch(batch, p_max)
    return ratio * np.median(rate(powers, batch, bandwidth_hz), axis=0)


@dataclass(frozen=True)
class ConstraintReport:
    conditional_rate_bps: FloatArray
    rate_floor_bps: FloatArray
    transmit_fraction: FloatArray
    max_power: float

    def violations(self, margin: float = 0.05) -> NDArray[np.bool_]:
        """Workers whose conditional mean rate misses r_0 by more than ``margin``."""
        return self.conditional_rate_bps < (1.0 - margin) * self.rate_floor_bps


def evaluate_constraints(
    powers: ArrayLike,
    H: CSIMatrix | ArrayLike,
    rate_floor_bps: ArrayLike,
    bandwidth_hz: float,
    p_max: float,
) -> ConstraintReport:
    """Empirical conditional mean rate of every worker against its floor."""
    p = np.atleast_2d(np.asarray(powers, dtype=np.float64))
    batch = as_csi_batch(H)
    mask = transmitting(p, p_max)
    rates = rate(p, batch, bandwidth_hz)
    counts = mask.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        conditional = np.where(
            counts > 0, (rates * mask).sum(axis=0) / np.maximum(counts, 1), 0.0
        )
    return ConstraintReport(
        conditional_rate_bps=conditional,
        rate_floor_bps=np.broadcast_to(
            np.asarray(rate_floor_bps, dtype=np.float64), conditional.shape
        ).copy(),
        transmit_fraction=counts / p.shape[0],
        max_power=float(p.max(initial=0.0)),
    )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lagrangian: float
    objective: float
    lambda_q: FloatArray
    lambda_r: FloatArray
    val_weighted_per: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=lambda: [])

    def __len__(self) -> int:
        return len(self.records)

    def write_csv(self, path: Path | str, header_lines: Sequence[str] = ()) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        L = self.records[0].lambda_q.size if self.records else 0
        with open(path, "w", newline="", encoding="utf-8") as f:
            for line in header_lines:
                f.write(line + "\n")
            writer = csv.writer(f)
            writer.writerow(
                ["epoch", "lagrangian", "g_q_tilde"]
                + [f"lambda_q_{i}" for i in range(L)]
                + [f"lambda_r_{i}" for i in range(L)]
                + ["val_weighted_per"]
            )
            for rec in self.records:
                writer.writerow(
                    [rec.epoch, repr(rec.lagrangian), repr(rec.objective)]
                    + [repr(float(v)) for v in rec.lambda_q]
                    + [repr(float(v)) for v in rec.lambda_r]
                    + [repr(rec.val_weighted_per)]
                )


@dataclass(frozen=True)
class TrainResult:
    policy: LearnedPolicy
    log: TrainingLog
    state: PrimalDualState
    best_epoch: int
    rate_floor_bps: FloatArray


def train(
    policy: LearnedPolicy,
    train_csi: ArrayLike,
    val_csi: ArrayLike,
    omega: ArrayLike,
    config: ExperimentConfig,
    seed: int = 0,
    rate_floor_bps: ArrayLike | None = None,
) -> TrainResult:
    """Run primal-dual epochs and keep the weights of the best validation epoch.

    Args:
        policy: Learned policy; its weights are the starting point.
        train_csi: (n, L, L) training CSI stack.
        val_csi: (n_val, L, L) validation CSI stack.
        omega: Per-worker weights of the objective.
        config: Step sizes, epochs, batch size, m, B, P_max, rate-floor rule.
        seed: Seeds the minibatch shuffling.
        rate_floor_bps: Explicit r_0 (b/s); defaults to the config rule.

    Raises:
        DivergenceError: If validation stays above ``divergence_factor`` times
            its best value for ``divergence_patience`` consecutive epochs.
    """
    H_train = as_csi_batch(train_csi)
    H_val = as_csi_batch(val_csi)
    p_max = config.p_max
    B = config.bandwidth_hz
    m = config.waterfall
    w = np.asarray(omega, dtype=np.float64)

    if rate_floor_bps is not None:
        floor = np.broadcast_to(
            np.asarray(rate_floor_bps, dtype=np.float64), (H_train.shape[-1],)
        ).copy()
    elif config.rate_floor_bps is not None:
        floor = np.full(H_train.shape[-1], config.rate_floor_bps)
    else:
        floor = default_rate_floor(H_train, p_max, B, config.rate_floor_ratio)

    state = PrimalDualState.initial(
        policy.weights,
        floor / B,
        StepSizes.from_config(config),
        literal_q_update=config.literal_q_update,
        theta_optimizer=config.theta_optimizer,
    )
    rng = np.random.default_rng([seed, 0x5EED])
    log = TrainingLog()
    best_val = math.inf
    best_theta = [w_.copy() for w_ in state.theta]
    best_epoch = 0
    strikes = 0
    n = H_train.shape[0]

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        values: list[float] = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            est = estimate_expectations(policy, H_train[idx], p_max, m, 1.0, state.theta)
            values.append(lagrangian(state, est, w))
            state = primal_dual_step(state, est, w)

        current = policy.with_weights(state.theta)
        val = weighted_sum_per(current.allocate_batch(H_val, p_max), H_val, w, m, p_max)
        log.records.append(
            EpochRecord(
                epoch=epoch,
                lagrangian=float(np.mean(values)),
                objective=weighted_success(state.q_tilde, w),
                lambda_q=state.lambda_q.copy(),
                lambda_r=state.lambda_r.copy(),
                val_weighted_per=val,
            )
        )
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_theta = [t.copy() for t in state.theta]
        if val > config.divergence_factor * best_val and val > 0.0:
            strikes += 1
        else:
            strikes = 0
        logger.debug("epoch %d: validation weighted PER %.6g", epoch, val)
        if epoch % 50 == 0:
            logger.info(
                "epoch %d/%d: validation weighted PER %.6g (best %.6g @ %d)",
                epoch,
                config.epochs,
                val,
                best_val,
                best_epoch,
            )
        if strikes >= config.divergence_patience:
            raise DivergenceError(
                f"validation weighted PER {val:.4g} stayed above "
                f"{config.divergence_factor}x its best ({best_val:.4g}) for "
                f"{strikes} epochs"
            )

    return TrainResult(
        policy=policy.with_weights(best_theta),
        log=log,
        state=state,
        best_epoch=best_epoch,
        rate_floor_bps=floor,
    )
