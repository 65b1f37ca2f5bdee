"""Waypoint-aware trajectory prediction with an interpretable goal-choice model."""

__version__ = "0.1.0"
