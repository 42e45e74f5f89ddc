"""Differential evasion attacks and defenses for full-precision / adapted model pairs."""

__version__ = "0.1.0"
