# File: src/fedpower/__init__.py
"""
Power allocation for federated learning over interference-limited uplinks.

Graph-convolutional and MLP power policies trained by primal-dual constrained
learning, model-based baselines, and an end-to-end FL simulator.
"""

from __future__ import annotations

__all__ = ["__version__"]

__version__ = "0.1.0"
