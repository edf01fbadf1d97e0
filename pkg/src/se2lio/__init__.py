"""Planar-constrained LiDAR(-inertial) odometry for ground vehicles."""

__version__ = "0.1.0"
