"""Online moving object segmentation for sequential LiDAR scans."""

from lidarmos.geometry import Scan, compose_relative, transform_scan
from lidarmos.labels import MovingLabel
from lidarmos.projection import ProjectionConfig, RangeImage, project_scan

__all__ = [
    "MovingLabel",
    "ProjectionConfig",
    "RangeImage",
    "Scan",
    "compose_relative",
    "project_scan",
    "transform_scan",
]

__version__ = "0.1.0"
