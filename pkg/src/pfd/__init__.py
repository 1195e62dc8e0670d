"""Privileged foresight distillation at desk scale, on a from-scratch autodiff."""

__version__ = "0.1.0"
