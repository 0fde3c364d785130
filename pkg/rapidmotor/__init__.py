"""
rapidmotor - Rapid motor adaptation for a planar hopper over fractal terrain.
"""

__version__ = "0.3.0"

from .cli import build_parser, main

__all__ = ["build_parser", "main"]
