"""Regulation-aware optical/thermal VQA network at desk scale."""

__version__ = "0.1.0"
