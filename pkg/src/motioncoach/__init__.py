"""Keyframe alignment, kinematic diagnosis and knowledge-grounded feedback for skeleton motion."""

__version__ = "0.1.0"
