# File: src/fedpower/channel.py
"""
Multi-antenna uplink channels and link-level wireless quantities.

Channels follow a substitute for the wideband spatial generator: each of the
n_R antennas sees an i.i.d. circularly-symmetric complex Gaussian coefficient,
scaled per worker by a log-normal gain whose mean equals the configured mean
gain. Noise power is normalized to 1.

The SINR/PER/rate functions accept numpy arrays or diffcore Tensors for the
power vector. Arrays go in, arrays come out; Tensors go in, Tensors come out
and stay differentiable with respect to the powers. Powers are shaped
(..., L) and CSI matrices (..., L, L), so a whole batch evaluates at once.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Union, overload

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .config import CHANNEL_MAGIC, DEFAULT_MEAN_GAIN_DB, DEFAULT_PATHLOSS_SPREAD_DB
from .diffcore import FloatArray, Tensor, apply_op, log1p, matmul, reshape
from .errors import (
    ConfigError,
    DegenerateChannelError,
    DomainError,
    FormatError,
    LengthError,
    ShapeError,
)

__all__ = [
    "ChannelRealization",
    "CSIMatrix",
    "LinkMetrics",
    "PowerLike",
    "dbw_to_watts",
    "watts_to_dbw",
    "generate_channels",
    "build_csi",
    "stack_csi",
    "sinr",
    "per",
    "per_from_sinr",
    "rate",
    "rate_and_delay",
    "weighted_success",
    "link_metrics",
    "save_channels",
    "load_channels",
    "export_csi_csv",
]

logger = logging.getLogger(__name__)

ComplexArray = NDArray[np.complex128]
PowerLike = Union[Tensor, ArrayLike]

_HEADER = struct.Struct("<III")


def dbw_to_watts(dbw: float) -> float:
    return float(10.0 ** (dbw / 10.0))


def watts_to_dbw(watts: float) -> float:
    return 10.0 * math.log10(watts)


@dataclass(frozen=True)
class CSIMatrix:
    """CSI matrix: alpha_i on the diagonal, beta_ij off the diagonal."""

    H: FloatArray
    interference_scale: float = 1.0

    @property
    def num_workers(self) -> int:
        return int(self.H.shape[-1])

    @property
    def alpha(self) -> FloatArray:
        return np.diagonal(self.H).copy()

    @property
    def beta(self) -> FloatArray:
        """Off-diagonal part of H (diagonal zeroed)."""
        off = self.H.copy()
        np.fill_diagonal(off, 0.0)
        return off


@dataclass(frozen=True)
class ChannelRealization:
    """One draw of all worker-to-BS channel vectors.

    ``raw`` has shape (n_R, L): column j is h_j.
    """

    raw: ComplexArray
    noise_var: FloatArray

    @property
    def num_antennas(self) -> int:
        return int(self.raw.shape[0])

    @property
    def num_workers(self) -> int:
        return int(self.raw.shape[1])

    @cached_property
    def csi(self) -> CSIMatrix:
        return build_csi(self, 1.0)


@dataclass(frozen=True)
class LinkMetrics:
    sinr: FloatArray
    rate: FloatArray
    per: FloatArray
    delay: FloatArray


def generate_channels(
    count: int,
    L: int,
    n_R: int,
    seed: int,
    pathloss_spread_db: float = DEFAULT_PATHLOSS_SPREAD_DB,
    mean_gain_db: float = DEFAULT_MEAN_GAIN_DB,
    offset: int = 0,
    stream: int | None = None,
) -> list[ChannelRealization]:
    """Draw ``count`` channel realizations.

    Realization ``k`` is generated from its own stream keyed by
    ``(seed, offset + k)``, or ``(seed, stream, offset + k)`` when a purpose
    tag is given, so any index range can be produced independently.

    Args:
        count: Number of realizations (>= 1).
        L: Number of workers (>= 1).
        n_R: Number of BS antennas (>= 1).
        seed: Master seed.
        pathloss_spread_db: Standard deviation of the per-worker gain in dB.
        mean_gain_db: Mean per-antenna gain E[|h|^2] in dB.
        offset: Index of the first realization.
        stream: Non-zero purpose tag separating this stream from the dataset.
    """
    if count < 1 or L < 1 or n_R < 1:
        raise ConfigError(f"need count, L, n_R >= 1, got {count}, {L}, {n_R}")
    if pathloss_spread_db < 0:
        raise ConfigError("pathloss spread must be non-negative")
    if stream is not None and stream < 1:
        raise ConfigError(f"stream tag must be positive, got {stream}")
    prefix = [seed] if stream is None else [seed, stream]

    mean_gain = 10.0 ** (mean_gain_db / 10.0)
    sigma_ln = pathloss_spread_db * math.log(10.0) / 10.0
    # E[10^(X/10)] for X ~ N(0, spread^2); dividing it out keeps the mean gain.
    lognormal_mean = math.exp(0.5 * sigma_ln * sigma_ln)
    noise = np.ones(L)

    out: list[ChannelRealization] = []
    for k in range(count):
        rng = np.random.default_rng([*prefix, offset + k])
        gains = mean_gain * np.exp(sigma_ln * rng.standard_normal(L)) / lognormal_mean
        fading = rng.standard_normal((n_R, L)) + 1j * rng.standard_normal((n_R, L))
        raw = (fading / math.sqrt(2.0)) * np.sqrt(gains)[None, :]
        out.append(ChannelRealization(raw=raw.astype(np.complex128), noise_var=noise))
    return out


def build_csi(ch: ChannelRealization, interference_scale: float = 1.0) -> CSIMatrix:
    """Build the CSI matrix of a realization.

    H_ii = |h_i|^2 / s_i and H_ij = c |h_i^H h_j|^2 / (s_i |h_i|^2), with s the
    noise variances and c the interference scale.

    Raises:
        ConfigError: If the interference scale is not positive.
        DegenerateChannelError: If some h_i is the zero vector.
    """
    if not interference_scale > 0.0:
        raise ConfigError(f"interference scale must be positive: {interference_scale}")
    gram = ch.raw.conj().T @ ch.raw
    energy = np.real(np.diagonal(gram)).copy()
    if np.any(energy <= 0.0):
        bad = np.flatnonzero(energy <= 0.0).tolist()
        raise DegenerateChannelError(f"zero channel vector for workers {bad}")
    sigma2 = ch.noise_var
    H = interference_scale * np.abs(gram) ** 2 / (sigma2[:, None] * energy[:, None])
    np.fill_diagonal(H, energy / sigma2)
    return CSIMatrix(H=H, interference_scale=interference_scale)


def stack_csi(matrices: list[CSIMatrix]) -> FloatArray:
    """Stack CSI matrices of equal size into a (b, L, L) array."""
    if not matrices:
        raise ShapeError("cannot stack an empty list of CSI matrices")
    return np.stack([m.H for m in matrices])


def _csi_array(H: CSIMatrix | ArrayLike) -> FloatArray:
    return np.asarray(H.H if isinstance(H, CSIMatrix) else H, dtype=np.float64)


def _split(H: FloatArray) -> tuple[FloatArray, FloatArray]:
    L = H.shape[-1]
    eye = np.eye(L, dtype=bool)
    alpha = np.diagonal(H, axis1=-2, axis2=-1)
    off = np.where(eye, 0.0, H)
    return alpha, off


@overload
def sinr(p: Tensor, H: CSIMatrix | ArrayLike) -> Tensor: ...
@overload
def sinr(p: ArrayLike, H: CSIMatrix | ArrayLike) -> FloatArray: ...
def sinr(p: PowerLike, H: CSIMatrix | ArrayLike) -> Tensor | FloatArray:
    """SINR_i = alpha_i p_i / (1 + sum_{j != i} beta_ij p_j).

    Raises:
        DomainError: If any power is negative.
        ShapeError: If the power length differs from L.
    """
    Hm = _csi_array(H)
    tp = p if isinstance(p, Tensor) else Tensor.constant(p)
    if tp.shape[-1:] != Hm.shape[-1:]:
        raise ShapeError(f"power shape {tp.shape} does not match CSI {Hm.shape}")
    if np.any(tp.values < 0.0):
        raise DomainError("transmit powers must be non-negative")
    alpha, off = _split(Hm)
    column = reshape(tp, tp.shape + (1,))
    interference = matmul(off, column)
    interference = reshape(interference, interference.shape[:-1])
    out = (alpha * tp) / (1.0 + interference)
    return out if isinstance(p, Tensor) else out.numpy()


def per_from_sinr(s: PowerLike, m: float) -> Tensor | FloatArray:
    """PER = 1 - exp(-m / SINR), with PER = 1 where SINR = 0."""
    if not m > 0.0:
        raise ConfigError(f"waterfall threshold must be positive, got {m}")
    ts = s if isinstance(s, Tensor) else Tensor.constant(s)
    x = ts.values
    positive = x > 0.0
    safe = np.where(positive, x, 1.0)
    with np.errstate(over="ignore", divide="ignore"):
        exponent = -m / safe
        success = np.where(positive, np.exp(exponent), 0.0)
        # d PER / d SINR = -m exp(-m/s) / s^2, in log space; 0 at s = 0.
        slope = np.where(positive, -m * np.exp(exponent - 2.0 * np.log(safe)), 0.0)
    out = apply_op("per", 1.0 - success, (ts,), lambda g: (g * slope,))
    return out if isinstance(s, Tensor) else out.numpy()


@overload
def per(p: Tensor, H: CSIMatrix | ArrayLike, m: float) -> Tensor: ...
@overload
def per(p: ArrayLike, H: CSIMatrix | ArrayLike, m: float) -> FloatArray: ...
def per(p: PowerLike, H: CSIMatrix | ArrayLike, m: float) -> Tensor | FloatArray:
    """Packet error rate of every worker under power vector ``p``."""
    return per_from_sinr(sinr(p, H), m)


@overload
def rate(p: Tensor, H: CSIMatrix | ArrayLike, B: float) -> Tensor: ...
@overload
def rate(p: ArrayLike, H: CSIMatrix | ArrayLike, B: float) -> FloatArray: ...
def rate(p: PowerLike, H: CSIMatrix | ArrayLike, B: float) -> Tensor | FloatArray:
    """Achievable rate B log(1 + SINR) in nats (natural logarithm)."""
    if not B > 0.0:
        raise ConfigError(f"bandwidth must be positive, got {B}")
    out = log1p(sinr(p, H)) * B
    return out if isinstance(p, Tensor) else out.numpy()


def rate_and_delay(
    p: ArrayLike, H: CSIMatrix | ArrayLike, B: float, payload_bits: float
) -> tuple[FloatArray, FloatArray]:
    """Rates and transmission delays; the delay is ``inf`` where the rate is 0."""
    if not payload_bits > 0:
        raise ConfigError(f"payload must be positive, got {payload_bits}")
    r = rate(p, H, B)
    with np.errstate(divide="ignore"):
        delay = np.where(r > 0.0, payload_bits / np.where(r > 0.0, r, 1.0), np.inf)
    return r, delay


@overload
def weighted_success(q_tilde: Tensor, omega: ArrayLike) -> Tensor: ...
@overload
def weighted_success(q_tilde: ArrayLike, omega: ArrayLike) -> float: ...
def weighted_success(q_tilde: PowerLike, omega: ArrayLike) -> Tensor | float:
    """g(q) = sum_i omega_i q_i."""
    w = np.asarray(omega, dtype=np.float64)
    if np.any(w < 0.0):
        raise DomainError("weights must be non-negative")
    tq = q_tilde if isinstance(q_tilde, Tensor) else Tensor.constant(q_tilde)
    if tq.shape[-1:] != w.shape:
        raise ShapeError(f"{tq.shape} success probabilities for {w.shape} weights")
    out = (tq * w).sum(axis=-1)
    return out if isinstance(q_tilde, Tensor) else out.item()


def link_metrics(
    p: ArrayLike, H: CSIMatrix | ArrayLike, m: float, B: float, payload_bits: float
) -> LinkMetrics:
    s = sinr(p, H)
    r, delay = rate_and_delay(p, H, B, payload_bits)
    return LinkMetrics(sinr=s, rate=r, per=per(p, H, m), delay=delay)


def save_channels(path: Path | str, realizations: list[ChannelRealization]) -> None:
    """Write realizations as magic, (count, L, n_R) and interleaved re/im."""
    if not realizations:
        raise ConfigError("refusing to write an empty channel dataset")
    n_R, L = realizations[0].raw.shape
    if any(r.raw.shape != (n_R, L) for r in realizations):
        raise ShapeError("all realizations must share (n_R, L)")
    with open(path, "wb") as f:
        f.write(CHANNEL_MAGIC)
        f.write(_HEADER.pack(len(realizations), L, n_R))
        for r in realizations:
            f.write(np.ascontiguousarray(r.raw, dtype="<c16").tobytes())
    logger.info("wrote %d channel realizations to %s", len(realizations), path)


def load_channels(path: Path | str) -> list[ChannelRealization]:
    """Read a dataset written by :func:`save_channels` (noise variance 1)."""
    data = Path(path).read_bytes()
    magic = data[: len(CHANNEL_MAGIC)]
    if magic != CHANNEL_MAGIC:
        raise FormatError(f"bad channel magic {magic!r} in {path}")
    start = len(CHANNEL_MAGIC)
    if len(data) < start + _HEADER.size:
        raise LengthError(f"truncated channel header in {path}")
    count, L, n_R = _HEADER.unpack_from(data, start)
    start += _HEADER.size
    per_item = n_R * L * 16
    if len(data) < start + count * per_item:
        raise LengthError(
            f"{path}: header announces {count} realizations, payload is short"
        )
    values = np.frombuffer(data, dtype="<c16", count=count * n_R * L, offset=start)
    values = values.reshape(count, n_R, L).astype(np.complex128)
    return [ChannelRealization(raw=v.copy(), noise_var=np.ones(L)) for v in values]


def export_csi_csv(
    path: Path | str,
    realizations: list[ChannelRealization],
    interference_scale: float = 1.0,
) -> None:
    """One CSV row per realization holding H in row-major order."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if realizations:
            L = realizations[0].num_workers
            writer.writerow([f"H_{i}_{j}" for i in range(L) for j in range(L)])
        for r in realizations:
            H = build_csi(r, interference_scale).H
            writer.writerow([repr(float(v)) for v in H.reshape(-1)])
