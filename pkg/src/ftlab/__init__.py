"""Desk-scale laboratory for comparing few-shot fine-tuning strategies."""

__version__ = "0.1.0"
