"""templateNet: depth-based object detection and pose estimation with fixed template gating."""

__version__ = "0.1.0"
