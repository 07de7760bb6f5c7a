"""Planar radiance fields for satellite views with rational polynomial cameras."""

__version__ = "0.1.0"
