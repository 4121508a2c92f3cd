"""Desk-scale SFT -> GRPO laboratory for multilabel label-set prediction."""

__version__ = "0.1.0"
