"""Desk-scale continual-learning lab with two-stage contrastive/task-specific training."""

__version__ = "0.1.0"
