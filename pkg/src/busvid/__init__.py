"""Bimodal ultrasound video diagnosis pipeline with a synthetic oracle."""

__version__ = "0.1.0"
