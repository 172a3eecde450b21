# File: tests/policies/__init__.py
"""
Tests for the power allocation policies.
"""

from __future__ import annotations
