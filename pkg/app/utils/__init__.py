"""Utility modules for Pitch Kinematics."""
