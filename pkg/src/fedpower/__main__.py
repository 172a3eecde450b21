# File: src/fedpower/__main__.py
"""
Entry point for executing the module as a script.
Allows running via `python -m fedpower`.
"""

from __future__ import annotations

from .cli import main

if __name__ == "__main__":
    main()
