# File: tests/policies/test_factory.py
"""
Tests for the policy factory.

Verifies that every configured policy kind resolves, and that learned
policies survive a checkpoint round trip.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from fedpower.checkpoint import write_checkpoint
from fedpower.config import POLICY_KINDS
from fedpower.errors import ConfigError, FormatError
from fedpower.policies.base import LearnedPolicy, PowerPolicy
from fedpower.policies.factory import build_policy, load_policy, save_policy
from fedpower.policies.strategies import GCNPolicy, MLPPolicy, OrthPolicy, RandPolicy


def test_factory_supports_all_config_kinds() -> None:
    """Every kind in POLICY_KINDS yields a policy of that kind."""
    for kind in POLICY_KINDS:
        policy = build_policy(kind, num_workers=4, seed=0)
        assert isinstance(policy, PowerPolicy)
        assert policy.kind == kind
        assert policy.learned == (kind in ("gcn", "mlp"))


def test_factory_classes() -> None:
    """Kinds map to the expected classes."""
    assert isinstance(build_policy("gcn", 8), GCNPolicy)
    assert isinstance(build_policy("mlp", 8), MLPPolicy)
    assert isinstance(build_policy("rand", 8), RandPolicy)
    assert isinstance(build_policy("orth", 8), OrthPolicy)


def test_factory_rejects_unknown_kind() -> None:
    """An unknown kind raises ConfigError naming it."""
    with pytest.raises(ConfigError, match="wmmse"):
        build_policy("wmmse", 8)


@pytest.mark.parametrize("kind", ["gcn", "mlp"])
def test_checkpoint_round_trip(kind: str, tmp_path: Path) -> None:
    """Saved learned policies reload with identical weights and outputs."""
    policy = build_policy(kind, num_workers=4, seed=9)
    assert isinstance(policy, LearnedPolicy)
    path = tmp_path / f"{kind}.fpm"
    save_policy(policy, path)
    loaded = load_policy(path)
    assert type(loaded) is type(policy)
    for a, b in zip(policy.weights, loaded.weights):
        np.testing.assert_array_equal(a, b)
    H = np.random.default_rng(0).uniform(0.1, 1.0, size=(4, 4))
    np.testing.assert_array_equal(policy.allocate(H, 0.01), loaded.allocate(H, 0.01))


def test_load_rejects_non_policy_checkpoints(tmp_path: Path) -> None:
    """Classifier checkpoints and malformed GCN chains are refused."""
    clf = tmp_path / "clf.fpm"
    write_checkpoint(clf, "clf", (2, 2), [np.zeros((2, 2)), np.zeros(2)])
    with pytest.raises(FormatError):
        load_policy(clf)
    bad = tmp_path / "gcn.fpm"
    write_checkpoint(bad, "gcn", (3, 2), [np.zeros((3, 2))])
    with pytest.raises(FormatError):
        load_policy(bad)
