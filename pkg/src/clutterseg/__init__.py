"""Zero-shot sparse-view 3D instance segmentation for tabletop clutter."""

__version__ = "0.1.0"
