"""Continuous scene graphs for an embodied agent in a gridworld room."""

__version__ = "0.1.0"
