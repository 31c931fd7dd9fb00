"""Continual learning with feature distillation in a Gated SAE's sparse feature space."""

__version__ = "0.1.0"
