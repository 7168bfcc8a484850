"""Pitch Kinematics - Application package."""
__version__ = "1.0.0"
