"""Lightweight monocular 3D human pose estimation: inference engine, mimicry-loss
training at toy scale, tracking and avatar-ready post-processing."""

__version__ = "0.1.0"
