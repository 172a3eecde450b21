# File: src/fedpower/policies/factory.py
"""
Factory module for creating policy instances.

Maps policy kinds and checkpoint files to PowerPolicy implementations.
"""

from __future__ import annotations

from pathlib import Path

from ..checkpoint import read_checkpoint, write_checkpoint
from ..config import GCN_DIMS, MLP_HIDDEN, POLICY_KINDS
from ..errors import ConfigError, FormatError
from .base import LearnedPolicy, PowerPolicy
from .strategies import GCNPolicy, MLPPolicy, OrthPolicy, RandPolicy

__all__ = ["build_policy", "save_policy", "load_policy"]


def build_policy(
    kind: str,
    num_workers: int,
    seed: int = 0,
    gcn_dims: tuple[int, ...] = GCN_DIMS,
    mlp_hidden: tuple[int, ...] = MLP_HIDDEN,
    log1p_csi: bool = False,
) -> PowerPolicy:
    """Factory function to return a freshly initialized policy.

    Args:
        kind: One of config.POLICY_KINDS.
        num_workers: Worker count; only the MLP is tied to it.
        seed: Seeds weight initialization (learned) or the draws (rand).

    Raises:
        ConfigError: For an unknown kind.
    """
    if kind == "gcn":
        return GCNPolicy(gcn_dims, seed=seed, log1p_csi=log1p_csi)
    if kind == "mlp":
        return MLPPolicy(num_workers, mlp_hidden, seed=seed)
    if kind == "rand":
        return RandPolicy(seed)
    if kind == "orth":
        return OrthPolicy()
    raise ConfigError(f"unknown policy kind {kind!r}; expected one of {POLICY_KINDS}")


def save_policy(policy: LearnedPolicy, path: Path | str) -> None:
    write_checkpoint(path, policy.kind, policy.layer_dims, policy.weights)


def load_policy(path: Path | str, log1p_csi: bool = False) -> LearnedPolicy:
    """Rebuild a learned policy from a checkpoint file.

    Raises:
        FormatError: If the checkpoint does not hold a policy.
    """
    ckpt = read_checkpoint(path)
    dims = ckpt.dims
    if ckpt.kind == "gcn":
        if len(dims) < 2 or dims[0] != 1:
            raise FormatError(f"GCN checkpoint {path} has dimension chain {dims}")
        return GCNPolicy(dims[1:], weights=ckpt.arrays(bias=False), log1p_csi=log1p_csi)
    if ckpt.kind == "mlp":
        if len(dims) < 2:
            raise FormatError(f"MLP checkpoint {path} has dimension chain {dims}")
        return MLPPolicy(dims[-1], dims[1:-1], weights=ckpt.arrays(bias=True))
    raise FormatError(f"checkpoint {path} holds kind {ckpt.kind!r}, not a policy")
