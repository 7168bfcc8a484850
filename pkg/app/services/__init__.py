"""Numerical services for Pitch Kinematics."""
