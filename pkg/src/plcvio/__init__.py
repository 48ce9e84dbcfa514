"""Cooperative visual-inertial odometry with point and line features."""

__version__ = "0.1.0"
