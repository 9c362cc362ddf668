"""Iterative multi-view human mesh recovery on a procedural body and synthetic rigs."""

__version__ = "0.1.0"
