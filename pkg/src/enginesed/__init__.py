"""Multimodal (audio + vibration) sound event detection for engine faults."""

__version__ = "0.1.0"
