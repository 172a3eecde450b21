# File: src/fedpower/policies/__init__.py
"""
Power allocation policies: learned (GCN, MLP) and model-based (Rand, Orth).
"""
