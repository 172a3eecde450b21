# File: tests/__init__.py
"""
Test suite for fedpower.

Contains unit tests for every module, CLI tests, and slow comparative runs
that train policies end to end.
"""

from __future__ import annotations
