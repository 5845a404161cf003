"""Camera-only 3D occupancy and scene-flow prediction with an occupancy-aware
spatial-temporal cascade, plus synthetic scenes and ray-based metrics."""

__version__ = "0.1.0"
