"""Garment draping: skinning initialization, two-stream network, physics-inspired loss, PBD oracle."""

__version__ = "0.1.0"
