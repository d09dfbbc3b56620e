"""Miniature masked-language-model pretraining with loss-driven token dropping."""

__version__ = "0.1.0"
