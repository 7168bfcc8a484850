"""Celery workers for Pitch Kinematics."""
