"""Car part parsing toolkit: shape spaces, synthetic scenes, pose solving and 3D metrics."""

__version__ = "0.1.0"
