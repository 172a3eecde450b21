# File: src/fedpower/config.py
"""
Configuration constants and the experiment configuration.

This module is the Single Source of Truth for every default: wireless
constants, architecture dimensions, primal-dual step sizes, FL settings, file
format magics, and the ExperimentConfig dataclass that the CLI resolves from
defaults, a YAML file and command-line flags.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

__all__ = [
    "POLICY_KINDS",
    "LEARNED_KINDS",
    "EXPERIMENT_KINDS",
    "THETA_OPTIMIZERS",
    "CHANNEL_MAGIC",
    "MODEL_MAGIC",
    "DEFAULT_NUM_WORKERS",
    "DEFAULT_NUM_ANTENNAS",
    "DEFAULT_PMAX_DBW",
    "DEFAULT_PATHLOSS_SPREAD_DB",
    "DEFAULT_MEAN_GAIN_DB",
    "DEFAULT_WATERFALL",
    "DEFAULT_BANDWIDTH_HZ",
    "GCN_DIMS",
    "MLP_HIDDEN",
    "CLASSIFIER_DIMS",
    "BITS_PER_PARAMETER",
    "ZERO_POWER_FRACTION",
    "SHARD_SIZE_RANGE",
    "NUM_CLASSES",
    "DESK_SCALE",
    "ExperimentConfig",
    "coerce",
    "load_config_file",
]

# --- Policy / experiment vocabularies ---

POLICY_KINDS: tuple[str, ...] = ("gcn", "mlp", "rand", "orth")
LEARNED_KINDS: frozenset[str] = frozenset({"gcn", "mlp"})
EXPERIMENT_KINDS: tuple[str, ...] = (
    "interference_sweep",
    "pmax_sweep",
    "size_sweep",
    "fl_run",
    "train",
    "eval",
)
THETA_OPTIMIZERS: tuple[str, ...] = ("sgd", "adam")

# --- File formats ---

CHANNEL_MAGIC = b"FPCHAN01"
MODEL_MAGIC = b"FPMDL01"

# --- Wireless system ---

DEFAULT_NUM_WORKERS = 8
DEFAULT_NUM_ANTENNAS = 10
DEFAULT_PMAX_DBW = -20.0
DEFAULT_PATHLOSS_SPREAD_DB = 8.0
# Substitute channel generator: 20 dB mean gain puts the default -20 dBW
# operating point where interference and noise are of the same order.
DEFAULT_MEAN_GAIN_DB = 20.0
DEFAULT_WATERFALL = 0.023
DEFAULT_BANDWIDTH_HZ = 1e6

# --- Architectures ---

GCN_DIMS: tuple[int, ...] = (16, 32, 64, 16, 2)
MLP_HIDDEN: tuple[int, ...] = (128, 256, 64, 16, 8)
CLASSIFIER_DIMS: tuple[int, ...] = (784, 50, 10)
BITS_PER_PARAMETER = 32
NUM_CLASSES = 10

# A worker whose power is at most this fraction of P_max is not transmitting.
ZERO_POWER_FRACTION = 1e-8

# Local dataset sizes are drawn uniformly from this inclusive range.
SHARD_SIZE_RANGE: tuple[int, int] = (20, 200)

# Channel counts and epochs used by the CLI unless --full-scale is given.
DESK_SCALE: dict[str, Any] = {
    "train_channels": 200,
    "val_channels": 200,
    "epochs": 200,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration of one experiment run.

    Defaults are the full-scale experimental settings; ``DESK_SCALE`` lists
    the fields the CLI shrinks for desk-scale runs.
    """

    experiment: str = "train"
    # Wireless system
    num_workers: int = DEFAULT_NUM_WORKERS
    num_antennas: int = DEFAULT_NUM_ANTENNAS
    p_max_dbw: float = DEFAULT_PMAX_DBW
    pathloss_spread_db: float = DEFAULT_PATHLOSS_SPREAD_DB
    mean_gain_db: float = DEFAULT_MEAN_GAIN_DB
    waterfall: float = DEFAULT_WATERFALL
    bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ
    # Sweeps
    interference_factors: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    pmax_grid: tuple[float, ...] = (-40.0, -30.0, -20.0, -10.0, 0.0, 10.0)
    worker_counts: tuple[int, ...] = (6, 8, 16, 24, 32)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    policies: tuple[str, ...] = POLICY_KINDS
    # Channel datasets
    train_channels: int = 1000
    val_channels: int = 1000
    test_channels: int = 1000
    # Policies
    policy: str = "gcn"
    checkpoint: str | None = None
    gcn_dims: tuple[int, ...] = GCN_DIMS
    mlp_hidden: tuple[int, ...] = MLP_HIDDEN
    log1p_csi: bool = False
    # Primal-dual training
    epochs: int = 1000
    batch_size: int = 64
    lr_theta: float = 1e-3
    lr_q: float = 1e-4
    lr_r: float = 1e-4
    lr_lambda_q: float = 1e-4
    lr_lambda_r: float = 1e-4
    theta_optimizer: str = "adam"
    literal_q_update: bool = False
    rate_floor_ratio: float = 0.5
    rate_floor_bps: float | None = None
    divergence_factor: float = 10.0
    divergence_patience: int = 50
    # Federated learning
    fl_rounds: int = 50
    local_epochs: int = 1
    local_batch: int = 16
    local_lr: float = 1e-3
    test_samples: int = 1000
    synthetic_samples: int = 4000
    mnist_dir: str | None = None
    checkpoint_every: int = 10
    # Run management
    run_dir: str = "runs/default"
    auto_train: bool = False

    def validate(self) -> ExperimentConfig:
        """Check value ranges; returns self so calls can be chained.

        Raises:
            ConfigError: On the first invalid field.
        """
        if self.experiment not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        positive_ints = (
            "num_workers",
            "num_antennas",
            "train_channels",
            "val_channels",
            "test_channels",
            "batch_size",
            "local_batch",
            "test_samples",
            "synthetic_samples",
            "divergence_patience",
            "checkpoint_every",
        )
        for name in positive_ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("epochs", "fl_rounds", "local_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.waterfall > 0 or not self.bandwidth_hz > 0:
            raise ConfigError("waterfall threshold and bandwidth must be positive")
        steps = ("lr_theta", "lr_q", "lr_r", "lr_lambda_q", "lr_lambda_r", "local_lr")
        for name in steps:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.rate_floor_ratio < 0:
            raise ConfigError("rate_floor_ratio must be non-negative")
        for kind in (*self.policies, self.policy):
            if kind not in POLICY_KINDS:
                raise ConfigError(f"unknown policy kind {kind!r}")
        if self.theta_optimizer not in THETA_OPTIMIZERS:
            raise ConfigError(f"unknown theta optimizer {self.theta_optimizer!r}")
        if any(f <= 0 for f in self.interference_factors):
            raise ConfigError("interference factors must be positive")
        if any(n < 1 for n in self.worker_counts):
            raise ConfigError("worker counts must be >= 1")
        return self

    @property
    def p_max(self) -> float:
        """P_max in watts."""
        return float(10.0 ** (self.p_max_dbw / 10.0))

    def replace(self, **changes: Any) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(typing.cast(tuple[Any, ...], value))
            out[f.name] = value
        return out

    def header_lines(self, master_seed: int | Sequence[int] | None = None) -> list[str]:
        """Render the resolved config as ``# key: value`` comment lines.

        ``master_seed`` is appended last; several seeds are comma-joined.
        """
        lines = [f"# {key}: {value}" for key, value in self.to_dict().items()]
        if isinstance(master_seed, int):
            lines.append(f"# master_seed: {master_seed}")
        elif master_seed is not None:
            lines.append(f"# master_seed: {','.join(str(s) for s in master_seed)}")
        return lines

    def snapshot(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8"
        )

    @classmethod
    def field_types(cls) -> dict[str, Any]:
        return typing.get_type_hints(cls)

    @classmethod
    def from_mapping(
        cls, values: Mapping[str, Any], base: ExperimentConfig | None = None
    ) -> ExperimentConfig:
        """Overlay ``values`` on ``base`` (defaults when omitted).

        Keys may use hyphens or underscores. Values are coerced to the field
        type; unknown keys or uncoercible values raise ConfigError.
        """
        base = base or cls()
        hints = cls.field_types()
        changes: dict[str, Any] = {}
        for raw_key, value in values.items():
            key = str(raw_key).replace("-", "_")
            if key not in hints:
                raise ConfigError(f"unknown config key {raw_key!r}")
            changes[key] = coerce(key, hints[key], value)
        return dataclasses.replace(base, **changes)


def _optional_inner(hint: Any) -> Any | None:
    """Return T for ``T | None`` hints, None otherwise."""
    origin = typing.get_origin(hint)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return None


def coerce(key: str, hint: Any, value: Any) -> Any:
    """Coerce a YAML/CLI value to the annotated field type."""
    inner = _optional_inner(hint)
    if inner is not None:
        if value is None or (isinstance(value, str) and value.lower() == "none"):
            return None
        return coerce(key, inner, value)
    try:
        if typing.get_origin(hint) is tuple:
            (item_type, _) = typing.get_args(hint)
            items: Iterable[Any]
            if isinstance(value, str):
                items = [v for v in value.replace(",", " ").split() if v]
            elif isinstance(value, (list, tuple)):
                items = typing.cast(Iterable[Any], value)
            else:
                items = [value]
            return tuple(coerce(key, item_type, v) for v in items)
        if hint is bool:
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if hint is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value {value!r} for {key}") from exc
    raise ConfigError(f"field {key} cannot be set from configuration")


def load_config_file(path: Path | str) -> dict[str, Any]:
    """Read a flat YAML mapping of config keys.

    Raises:
        ConfigError: If the file is not a flat mapping.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a key-value mapping")
    mapping = typing.cast(dict[Any, Any], data)
    for key, value in mapping.items():
        if isinstance(value, dict):
            raise ConfigError(f"config file {path}: nested value under {key!r}")
    return {str(k): v for k, v in mapping.items()}
