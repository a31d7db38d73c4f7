"""Interpersonal breath synchronization over vibrotactile belts, in software."""

__version__ = "0.1.0"
