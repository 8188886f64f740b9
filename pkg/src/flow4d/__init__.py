"""Joint 4D reconstruction and motion-flow estimation for point cloud sequences."""

__version__ = "0.1.0"
