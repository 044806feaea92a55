"""Reinforcement learning of motion-matching queries for target reaching."""

__version__ = "0.1.0"
