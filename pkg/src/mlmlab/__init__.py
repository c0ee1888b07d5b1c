"""Desk-scale laboratory for masked-language-model pretraining objectives."""

__version__ = "0.1.0"
