# File: src/fedpower/policies/base.py
"""
Base classes for power allocation policies.

Defines the interface every policy implements: map a CSI matrix (or a batch
of them) and P_max to transmit powers in [0, P_max].
"""

from __future__ import annotations

import copy
from abc import ABC, abstractmethod
from collections.abc import Sequence
from typing import ClassVar, TypeVar

import numpy as np
from numpy.typing import ArrayLike

from ..channel import CSIMatrix
from ..config import ZERO_POWER_FRACTION
from ..diffcore import FloatArray, Tensor
from ..errors import ConfigError, ShapeError

__all__ = ["PowerPolicy", "LearnedPolicy", "as_csi_batch", "transmitting"]

_Learned = TypeVar("_Learned", bound="LearnedPolicy")


def as_csi_batch(H: CSIMatrix | ArrayLike) -> FloatArray:
    """Return H as a (b, L, L) float array."""
    array = np.asarray(H.H if isinstance(H, CSIMatrix) else H, dtype=np.float64)
    if array.ndim == 2:
        array = array[None]
    if array.ndim != 3 or array.shape[-1] != array.shape[-2]:
        raise ShapeError(f"expected (L, L) or (b, L, L) CSI, got {array.shape}")
    return array


def transmitting(powers: FloatArray, p_max: float) -> FloatArray:
    """Boolean mask of workers whose power exceeds the zero-power threshold."""
    return powers > ZERO_POWER_FRACTION * p_max


class PowerPolicy(ABC):
    """
    Abstract base class for power allocation policies.
    """

    kind: ClassVar[str]
    learned: ClassVar[bool] = False
    # Model-based policies pick participants with a one-shot rate check.
    selects_participants: ClassVar[bool] = False

    def allocate(self, csi: CSIMatrix | ArrayLike, p_max: float) -> FloatArray:
        """Powers for a single CSI matrix, shape (L,)."""
        batch = as_csi_batch(csi)
        if batch.shape[0] != 1:
            raise ShapeError("allocate takes one CSI matrix; use allocate_batch")
        return self.allocate_batch(batch, p_max)[0]

    def allocate_batch(self, H: CSIMatrix | ArrayLike, p_max: float) -> FloatArray:
        """Powers for a (b, L, L) stack, shape (b, L), every entry in [0, p_max]."""
        if not p_max > 0.0:
            raise ConfigError(f"P_max must be positive, got {p_max}")
        return self._allocate(as_csi_batch(H), p_max)

    def supports(self, num_workers: int) -> bool:
        """Whether the policy can serve a system with this many workers."""
        return num_workers >= 1

    @abstractmethod
    def _allocate(self, H: FloatArray, p_max: float) -> FloatArray:
        raise NotImplementedError


class LearnedPolicy(PowerPolicy):
    """
    Policy with trainable weights whose forward pass runs on diffcore.

    ``forward`` is a pure function of its weight tensors, so training code
    binds its own parameter tensors while ``weights`` keeps the arrays used
    for inference.
    """

    learned: ClassVar[bool] = True
    has_bias: ClassVar[bool] = False

    def __init__(self, weights: Sequence[FloatArray]) -> None:
        self.weights: list[FloatArray] = [np.array(w, dtype=np.float64) for w in weights]

    @property
    @abstractmethod
    def layer_dims(self) -> tuple[int, ...]:
        """Dimension chain stored in checkpoints."""
        raise NotImplementedError

    @abstractmethod
    def forward(
        self, H: CSIMatrix | ArrayLike, p_max: float, theta: Sequence[Tensor]
    ) -> Tensor:
        """Differentiable powers of shape (b, L) under weight tensors ``theta``."""
        raise NotImplementedError

    def bind(self, weights: Sequence[FloatArray] | None = None) -> list[Tensor]:
        """Fresh trainable leaf tensors holding ``weights`` (default: own)."""
        source = self.weights if weights is None else weights
        return [Tensor.parameter(w) for w in source]

    def with_weights(self: _Learned, weights: Sequence[FloatArray]) -> _Learned:
        clone = copy.copy(self)
        clone.weights = [np.array(w, dtype=np.float64) for w in weights]
        return clone

    def num_parameters(self) -> int:
        return int(sum(w.size for w in self.weights))

    def _allocate(self, H: FloatArray, p_max: float) -> FloatArray:
        theta = [Tensor.constant(w) for w in self.weights]
        return self.forward(H, p_max, theta).numpy()
