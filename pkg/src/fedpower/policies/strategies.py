# File: src/fedpower/policies/strategies.py
"""
Specific policy implementations.

Contains the graph-convolutional policy (weights shared across nodes, so it
runs on any number of workers), the MLP policy (fixed to its training size)
and the Rand/Orth baselines with their one-shot participant selection.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from typing import ClassVar

import numpy as np
from numpy.typing import ArrayLike

from ..channel import CSIMatrix, rate
from ..config import GCN_DIMS, MLP_HIDDEN
from ..diffcore import FloatArray, Tensor, elu, matmul, sigmoid_scaled, take
from ..errors import DegenerateGraphError, DimensionError, ShapeError
from .base import LearnedPolicy, PowerPolicy, as_csi_batch

__all__ = [
    "GCNPolicy",
    "MLPPolicy",
    "RandPolicy",
    "OrthPolicy",
    "normalized_adjacency",
    "glorot_uniform",
    "rand_policy",
    "orth_policy",
    "baseline_select",
]

logger = logging.getLogger(__name__)

_UNIT_STEPS = 2**53


def normalized_adjacency(H: CSIMatrix | ArrayLike) -> FloatArray:
    """D^{-1/2} H D^{-1/2} with D = diag(H 1); batches over leading axes.

    Raises:
        DegenerateGraphError: If a row sum is not strictly positive.
    """
    A = np.asarray(H.H if isinstance(H, CSIMatrix) else H, dtype=np.float64)
    degree = A.sum(axis=-1)
    if not np.all(np.isfinite(degree)) or np.any(degree <= 0.0):
        raise DegenerateGraphError("CSI graph has a node with non-positive degree")
    scale = 1.0 / np.sqrt(degree)
    return scale[..., :, None] * A * scale[..., None, :]


def glorot_uniform(
    dims: Sequence[int], rng: np.random.Generator, bias: bool = False
) -> list[FloatArray]:
    """Uniform in +-sqrt(6 / (d_in + d_out)) per layer; biases start at zero."""
    out: list[FloatArray] = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (d_in + d_out))
        out.append(rng.uniform(-limit, limit, size=(d_in, d_out)))
        if bias:
            out.append(np.zeros(d_out))
    return out


class GCNPolicy(LearnedPolicy):
    """
    Graph-convolutional power policy.

    Layer t computes Z_t = sigma_t(A Z_{t-1} Theta_t) with A the normalized
    CSI adjacency and Z_0 = P_max 1. Hidden layers use ELU; the power of each
    node is P_max sigmoid of the first channel of the last layer.
    """

    kind: ClassVar[str] = "gcn"

    def __init__(
        self,
        dims: Sequence[int] = GCN_DIMS,
        seed: int = 0,
        weights: Sequence[FloatArray] | None = None,
        log1p_csi: bool = False,
    ) -> None:
        self.dims = tuple(int(d) for d in dims)
        if not self.dims or any(d < 1 for d in self.dims):
            raise ShapeError(f"invalid GCN dimensions {self.dims}")
        chain = (1, *self.dims)
        if weights is None:
            weights = glorot_uniform(chain, np.random.default_rng(seed))
        expected = [(a, b) for a, b in zip(chain[:-1], chain[1:])]
        if [tuple(np.shape(w)) for w in weights] != expected:
            raise ShapeError(f"GCN weights do not match dimension chain {chain}")
        super().__init__(weights)
        self.log1p_csi = log1p_csi

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (1, *self.dims)

    def adjacency(self, H: CSIMatrix | ArrayLike) -> FloatArray:
        batch = as_csi_batch(H)
        if self.log1p_csi:
            batch = np.log1p(batch)
        return normalized_adjacency(batch)

    def forward(
        self, H: CSIMatrix | ArrayLike, p_max: float, theta: Sequence[Tensor]
    ) -> Tensor:
        A = self.adjacency(H)
        b, L, _ = A.shape
        z = Tensor.constant(np.full((b, L, 1), p_max))
        last = len(theta) - 1
        for t, weight in enumerate(theta):
            pre = matmul(A, matmul(z, weight))
            if t < last:
                z = elu(pre)
            else:
                z = pre
        return sigmoid_scaled(take(z, 0, axis=-1), p_max)


class MLPPolicy(LearnedPolicy):
    """
    Fully connected power policy on the flattened CSI matrix with P_max
    appended. Works only for the worker count it was built for.

    CSI entries enter as log1p(H); P_max is appended in watts.
    """

    kind: ClassVar[str] = "mlp"
    has_bias: ClassVar[bool] = True

    def __init__(
        self,
        num_workers: int,
        hidden: Sequence[int] = MLP_HIDDEN,
        seed: int = 0,
        weights: Sequence[FloatArray] | None = None,
    ) -> None:
        if num_workers < 1:
            raise ShapeError("MLP policy needs at least one worker")
        self.num_workers = num_workers
        self.hidden = tuple(int(h) for h in hidden)
        dims = self.layer_dims
        if weights is None:
            weights = glorot_uniform(dims, np.random.default_rng(seed), bias=True)
        if len(weights) != 2 * (len(dims) - 1):
            raise ShapeError(f"MLP weights do not match dimension chain {dims}")
        super().__init__(weights)

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.num_workers**2 + 1, *self.hidden, self.num_workers)

    def supports(self, num_workers: int) -> bool:
        return num_workers == self.num_workers

    def features(self, H: CSIMatrix | ArrayLike, p_max: float) -> FloatArray:
        batch = as_csi_batch(H)
        L = batch.shape[-1]
        if L != self.num_workers:
            raise DimensionError(
                f"MLP policy was built for L={self.num_workers}, got L={L}"
            )
        flat = np.log1p(batch.reshape(batch.shape[0], L * L))
        return np.concatenate([flat, np.full((batch.shape[0], 1), p_max)], axis=1)

    def forward(
        self, H: CSIMatrix | ArrayLike, p_max: float, theta: Sequence[Tensor]
    ) -> Tensor:
        h = Tensor.constant(self.features(H, p_max))
        n_layers = len(theta) // 2
        for layer in range(n_layers):
            weight, bias = theta[2 * layer], theta[2 * layer + 1]
            h = matmul(h, weight) + bias
            if layer < n_layers - 1:
                h = elu(h)
        return sigmoid_scaled(h, p_max)


class RandPolicy(PowerPolicy):
    """Uniform random power U(0, P_max) per worker, reproducible per seed."""

    kind: ClassVar[str] = "rand"
    selects_participants: ClassVar[bool] = True

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def _allocate(self, H: FloatArray, p_max: float) -> FloatArray:
        # k / 2**53 with k in [1, 2**53) covers the open unit interval.
        steps = self.rng.integers(1, _UNIT_STEPS, size=H.shape[:2])
        units = steps.astype(np.float64) / float(_UNIT_STEPS)
        return units * p_max


class OrthPolicy(PowerPolicy):
    """Every worker at P_max: optimal when channels are orthogonal."""

    kind: ClassVar[str] = "orth"
    selects_participants: ClassVar[bool] = True

    def _allocate(self, H: FloatArray, p_max: float) -> FloatArray:
        return np.full(H.shape[:2], p_max, dtype=np.float64)


def rand_policy(L: int, p_max: float, seed: int) -> FloatArray:
    return RandPolicy(seed).allocate(np.eye(L), p_max)


def orth_policy(L: int, p_max: float) -> FloatArray:
    return OrthPolicy().allocate(np.eye(L), p_max)


def baseline_select(
    powers: ArrayLike,
    H: CSIMatrix | ArrayLike,
    rate_floor_bps: ArrayLike,
    bandwidth_hz: float,
) -> FloatArray:
    """Zero out workers whose rate under the full power vector is below r_0.

    The rates are computed once with every worker at its allocated power; the
    mask is not iterated.
    """
    p = np.asarray(powers, dtype=np.float64)
    rates = rate(p, H, bandwidth_hz)
    keep = rates >= np.asarray(rate_floor_bps, dtype=np.float64)
    dropped = int(np.count_nonzero(~keep))
    if dropped:
        logger.debug("baseline selection dropped %d of %d workers", dropped, keep.size)
    return np.where(keep, p, 0.0)
