"""Replay-free continual learning with prototype-sample relation distillation."""

__version__ = "0.1.0"
