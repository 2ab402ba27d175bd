"""Learned query rewriting under a time budget, against a simulated database."""

__version__ = "0.1.0"
