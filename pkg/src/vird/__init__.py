"""Cross-view camera pose estimation with view-invariant, orientation-aware descriptors."""

__version__ = "0.1.0"
