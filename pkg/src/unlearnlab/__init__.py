"""Desk-scale machine-unlearning lab: pretrain, unlearn, attack, diagnose."""

__version__ = "0.1.0"
