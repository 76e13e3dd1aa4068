"""Desk-scale frequency-domain DOT with projection-based nuisance marginalization."""

__version__ = "0.1.0"
