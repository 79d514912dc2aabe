"""Spatially conditioned neural speaker diarization at desk scale."""

__version__ = "0.1.0"
