"""Compiler for constrained recurrence systems over dense and sparse tensors."""

__version__ = "0.1.0"
