"""Symbolic workbench for exterior differential systems and constrained
variational problems."""

__version__ = "0.1.0"
