"""Markov-logic reasoning over classifier outputs with certified smoothing."""

__version__ = "0.1.0"
