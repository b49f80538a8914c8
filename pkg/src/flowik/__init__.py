"""Conditional continuous normalizing flows for sampling inverse kinematics solutions."""

__version__ = "0.1.0"
