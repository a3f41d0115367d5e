"""Distributed M-estimation: simple averaging and the one-step Newton update."""

__version__ = "0.1.0"
