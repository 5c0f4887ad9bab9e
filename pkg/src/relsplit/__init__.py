"""Leakage-safe, language x label stratified cross-validation and a hashed-feature
relevance classifier with optional two-stage (auxiliary task first) training."""

__version__ = "0.1.0"
