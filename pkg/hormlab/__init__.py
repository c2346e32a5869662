"""Hörmander-frame geometry, degenerate parabolic solvers and Harnack harnesses."""

__version__ = "0.1.0"
