"""Sobolev Training: fitting networks to target values and target derivatives."""

__version__ = "0.1.0"
