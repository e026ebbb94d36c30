"""Discrete auto-regressive variational attention models for text."""

__version__ = "0.1.0"
